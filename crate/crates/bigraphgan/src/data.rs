//! Deterministic synthetic pose-transfer corpus.
//!
//! Every sample is an articulated stick figure rendered from an 18-joint
//! skeleton (the OpenPose body-joint convention), so pose-transfer ground
//! truth is exact: one identity (palette, proportions, background) rendered
//! under two sampled poses. Everything is a pure function of seeds.
//!
//! On-disk corpus layout (all formats byte-stable):
//! - `manifest.txt` — one `<stem> <split>` line per pair;
//! - `<stem>_ia.ppm`, `<stem>_ib.ppm` — 8-bit binary PPM (P6) images;
//! - `<stem>_a.skel`, `<stem>_b.skel` — one `joint-index x y visible` line
//!   per joint.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const JOINT_COUNT: usize = 18;

/// Joint names in channel order.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

/// Skeleton edge list of the standard 18-joint body graph. Sub-pose
/// decomposition and the foreground mask both derive from this table.
pub const SKELETON_EDGES: [(usize, usize); 17] = [
    (0, 1),   // nose - neck
    (1, 2),   // neck - r_shoulder
    (2, 3),   // r_shoulder - r_elbow
    (3, 4),   // r_elbow - r_wrist
    (1, 5),   // neck - l_shoulder
    (5, 6),   // l_shoulder - l_elbow
    (6, 7),   // l_elbow - l_wrist
    (1, 8),   // neck - r_hip
    (8, 9),   // r_hip - r_knee
    (9, 10),  // r_knee - r_ankle
    (1, 11),  // neck - l_hip
    (11, 12), // l_hip - l_knee
    (12, 13), // l_knee - l_ankle
    (0, 14),  // nose - r_eye
    (14, 16), // r_eye - r_ear
    (0, 15),  // nose - l_eye
    (15, 17), // l_eye - l_ear
];

/// Joints adjacent to `joint` in [`SKELETON_EDGES`].
pub fn joint_neighbors(joint: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &(a, b) in &SKELETON_EDGES {
        if a == joint {
            out.push(b);
        } else if b == joint {
            out.push(a);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
}

/// 18 joint positions in pixel units; `None` marks an absent joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub joints: [Option<Joint>; JOINT_COUNT],
}

impl Skeleton {
    pub fn empty() -> Self {
        Skeleton {
            joints: [None; JOINT_COUNT],
        }
    }

    pub fn visible(&self, j: usize) -> Option<Joint> {
        self.joints[j]
    }
}

/// Upper bound on any rendered capsule radius, in units of `min(h, w)`.
/// The foreground pose mask uses this as its base radius.
pub const MAX_LIMB_RADIUS_FRAC: f64 = 0.062;

/// Sampled body proportions, palette, and background for one figure.
/// Lengths and radii are fractions of `min(h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub seed: u64,
    pub torso_len: f64,
    pub head_len: f64,
    pub head_radius: f64,
    pub shoulder_w: f64,
    pub hip_w: f64,
    pub upper_arm: f64,
    pub lower_arm: f64,
    pub upper_leg: f64,
    pub lower_leg: f64,
    pub limb_radius: f64,
    pub torso_radius: f64,
    /// Palette: head, torso, right arm, left arm, right leg, left leg, face.
    pub colors: [[f64; 3]; 7],
    pub bg_a: [f64; 3],
    pub bg_b: [f64; 3],
    pub bg_freq: (f64, f64),
    pub bg_phase: f64,
}

/// Documented sampling ranges for the body segment lengths (fractions of
/// `min(h, w)`).
pub const LIMB_RANGES: [(&str, f64, f64); 9] = [
    ("torso_len", 0.20, 0.26),
    ("head_len", 0.08, 0.10),
    ("shoulder_w", 0.14, 0.18),
    ("hip_w", 0.09, 0.12),
    ("upper_arm", 0.10, 0.13),
    ("lower_arm", 0.09, 0.12),
    ("upper_leg", 0.11, 0.14),
    ("lower_leg", 0.10, 0.13),
    ("head_radius", 0.050, 0.062),
];

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        uniform(rng, lo, hi),
        uniform(rng, lo, hi),
        uniform(rng, lo, hi),
    ]
}

/// Sample an identity descriptor. Same seed, same descriptor.
pub fn synth_identity(seed: u64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1DE17171);
    let torso_len = uniform(&mut rng, 0.20, 0.26);
    let head_len = uniform(&mut rng, 0.08, 0.10);
    let shoulder_w = uniform(&mut rng, 0.14, 0.18);
    let hip_w = uniform(&mut rng, 0.09, 0.12);
    let upper_arm = uniform(&mut rng, 0.10, 0.13);
    let lower_arm = uniform(&mut rng, 0.09, 0.12);
    let upper_leg = uniform(&mut rng, 0.11, 0.14);
    let lower_leg = uniform(&mut rng, 0.10, 0.13);
    let head_radius = uniform(&mut rng, 0.050, 0.062);
    let limb_radius = uniform(&mut rng, 0.020, 0.030);
    let torso_radius = uniform(&mut rng, 0.045, 0.060);
    let colors = [
        color(&mut rng, 0.25, 0.95), // head
        color(&mut rng, 0.15, 0.95), // torso
        color(&mut rng, 0.15, 0.95), // right arm
        color(&mut rng, 0.15, 0.95), // left arm
        color(&mut rng, 0.15, 0.95), // right leg
        color(&mut rng, 0.15, 0.95), // left leg
        color(&mut rng, 0.05, 0.35), // face features
    ];
    let bg_a = color(&mut rng, 0.05, 0.95);
    let bg_b = color(&mut rng, 0.05, 0.95);
    let bg_freq = (uniform(&mut rng, 0.4, 1.6), uniform(&mut rng, 0.4, 1.6));
    let bg_phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
    Identity {
        seed,
        torso_len,
        head_len,
        head_radius,
        shoulder_w,
        hip_w,
        upper_arm,
        lower_arm,
        upper_leg,
        lower_leg,
        limb_radius,
        torso_radius,
        colors,
        bg_a,
        bg_b,
        bg_freq,
        bg_phase,
    }
}

/// Background color at a pixel, before any figure is painted.
pub fn background_at(id: &Identity, x: f64, y: f64, h: usize, w: usize) -> [f64; 3] {
    let t = std::f64::consts::TAU
        * (id.bg_freq.0 * x / w as f64 + id.bg_freq.1 * y / h as f64)
        + id.bg_phase;
    let v = 0.5 * (1.0 + t.cos());
    [
        id.bg_a[0] * v + id.bg_b[0] * (1.0 - v),
        id.bg_a[1] * v + id.bg_b[1] * (1.0 - v),
        id.bg_a[2] * v + id.bg_b[2] * (1.0 - v),
    ]
}

/// Sample joint angles within anatomical ranges and solve the figure by
/// forward kinematics; the root is clamped so every capsule stays inside the
/// image. Returns the skeleton and the rendered image (`[3,h,w]`, values in
/// `[0,1]`).
pub fn synth_pose(id: &Identity, pose_seed: u64, h: usize, w: usize) -> (Skeleton, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed ^ 0x9053C0DE);
    let u = h.min(w) as f64;

    let tilt = uniform(&mut rng, -0.14, 0.14); // torso tilt off vertical
    // up: torso axis direction (towards the head)
    let up = (tilt.sin(), -tilt.cos());
    let right = (-up.1, up.0);

    // conservative reach for root clamping
    let arm_span = id.shoulder_w / 2.0 + id.upper_arm + id.lower_arm;
    let reach_up = id.torso_len + id.head_len + id.head_radius * 2.2;
    let reach_down = id.upper_leg + id.lower_leg + id.hip_w;
    let reach_side = arm_span.max(id.hip_w / 2.0 + 0.04) + 0.05;
    let margin = id.torso_radius.max(MAX_LIMB_RADIUS_FRAC) + 2.5 / u;

    let clamp_range = |lo: f64, hi: f64| if lo < hi { (lo, hi) } else { ((lo + hi) / 2.0, (lo + hi) / 2.0) };
    let (x_lo, x_hi) = clamp_range((reach_side + margin) * u, w as f64 - 1.0 - (reach_side + margin) * u);
    let (y_lo, y_hi) = clamp_range((reach_up + margin) * u, h as f64 - 1.0 - (reach_down + margin) * u);
    let root = Joint {
        x: uniform(&mut rng, x_lo, x_hi),
        y: uniform(&mut rng, y_lo, y_hi),
    };

    let at = |base: Joint, dir: (f64, f64), dist: f64| Joint {
        x: base.x + dir.0 * dist * u,
        y: base.y + dir.1 * dist * u,
    };
    // direction at angle `a` measured from straight down, in the torso frame
    let swing = |a: f64| {
        let down = (-up.0, -up.1);
        (
            down.0 * a.cos() + right.0 * a.sin(),
            down.1 * a.cos() + right.1 * a.sin(),
        )
    };

    let mut joints = [None; JOINT_COUNT];
    let neck = at(root, up, id.torso_len);
    joints[1] = Some(neck);
    joints[8] = Some(at(root, right, -id.hip_w / 2.0)); // r_hip
    joints[11] = Some(at(root, right, id.hip_w / 2.0)); // l_hip
    joints[2] = Some(at(neck, right, -id.shoulder_w / 2.0)); // r_shoulder
    joints[5] = Some(at(neck, right, id.shoulder_w / 2.0)); // l_shoulder

    // arms: swing from the shoulder, elbows bend outward
    for (sh, el, wr, side) in [(2usize, 3usize, 4usize, -1.0f64), (5, 6, 7, 1.0)] {
        let a_upper = side * uniform(&mut rng, -0.5, 1.25);
        let bend = uniform(&mut rng, 0.0, 1.9);
        let a_lower = a_upper + side * bend;
        let elbow = at(joints[sh].unwrap(), swing(a_upper), id.upper_arm);
        let wrist = at(elbow, swing(a_lower), id.lower_arm);
        joints[el] = Some(elbow);
        joints[wr] = Some(wrist);
    }

    // legs: hip swing, knees bend backward
    for (hp, kn, an, side) in [(8usize, 9usize, 10usize, -1.0f64), (11, 12, 13, 1.0)] {
        let a_hip = side * uniform(&mut rng, -0.12, 0.55);
        let bend = uniform(&mut rng, 0.0, 0.9);
        let a_knee = a_hip - side * bend * 0.5;
        let knee = at(joints[hp].unwrap(), swing(a_hip), id.upper_leg);
        let ankle = at(knee, swing(a_knee), id.lower_leg);
        joints[kn] = Some(knee);
        joints[an] = Some(ankle);
    }

    // head: nose above the neck with its own small tilt
    let head_tilt = uniform(&mut rng, -0.35, 0.35);
    let head_dir = (
        up.0 * head_tilt.cos() + right.0 * head_tilt.sin(),
        up.1 * head_tilt.cos() + right.1 * head_tilt.sin(),
    );
    let head_right = (-head_dir.1, head_dir.0);
    let nose = at(neck, head_dir, id.head_len + id.head_radius);
    joints[0] = Some(nose);
    let eye_up = id.head_radius * 0.35;
    let eye_side = id.head_radius * 0.45;
    let ear_side = id.head_radius * 0.95;
    joints[14] = Some(at(at(nose, head_dir, eye_up), head_right, -eye_side)); // r_eye
    joints[15] = Some(at(at(nose, head_dir, eye_up), head_right, eye_side)); // l_eye
    let ear_base = at(nose, head_dir, eye_up * 0.5);
    joints[16] = Some(at(ear_base, head_right, -ear_side)); // r_ear
    joints[17] = Some(at(ear_base, head_right, ear_side)); // l_ear

    // occasionally drop one ear, as a pose-dependent absence
    if rng.gen::<f64>() < 0.10 {
        joints[16] = None;
    }
    if rng.gen::<f64>() < 0.10 {
        joints[17] = None;
    }

    let skel = Skeleton { joints };
    let img = render_figure(id, &skel, h, w);
    (skel, img)
}

fn dist_to_segment(px: f64, py: f64, a: Joint, b: Joint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

struct Capsule {
    a: Joint,
    b: Joint,
    radius: f64,
    color: [f64; 3],
}

fn paint(canvas: &mut [f64], h: usize, w: usize, cap: &Capsule) {
    let x0 = ((cap.a.x.min(cap.b.x) - cap.radius - 1.5).floor().max(0.0)) as usize;
    let x1 = ((cap.a.x.max(cap.b.x) + cap.radius + 1.5).ceil().min(w as f64 - 1.0)) as usize;
    let y0 = ((cap.a.y.min(cap.b.y) - cap.radius - 1.5).floor().max(0.0)) as usize;
    let y1 = ((cap.a.y.max(cap.b.y) + cap.radius + 1.5).ceil().min(h as f64 - 1.0)) as usize;
    let plane = h * w;
    for iy in y0..=y1 {
        for ix in x0..=x1 {
            let d = dist_to_segment(ix as f64, iy as f64, cap.a, cap.b);
            let alpha = (cap.radius + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let idx = iy * w + ix;
                for ch in 0..3 {
                    let v = &mut canvas[ch * plane + idx];
                    *v = *v * (1.0 - alpha) + cap.color[ch] * alpha;
                }
            }
        }
    }
}

fn push_bone(
    caps: &mut Vec<Capsule>,
    skel: &Skeleton,
    a: usize,
    b: usize,
    radius: f64,
    color: [f64; 3],
) {
    if let (Some(ja), Some(jb)) = (skel.joints[a], skel.joints[b]) {
        caps.push(Capsule {
            a: ja,
            b: jb,
            radius,
            color,
        });
    }
}

/// Capsule bones of a figure in paint order, with identity radii and colors.
fn figure_capsules(id: &Identity, skel: &Skeleton, u: f64) -> Vec<Capsule> {
    let limb_r = id.limb_radius * u;
    let mut caps = Vec::new();
    // legs first, then torso, head, face features, arms on top
    push_bone(&mut caps, skel, 8, 9, limb_r, id.colors[4]);
    push_bone(&mut caps, skel, 9, 10, limb_r * 0.9, id.colors[4]);
    push_bone(&mut caps, skel, 11, 12, limb_r, id.colors[5]);
    push_bone(&mut caps, skel, 12, 13, limb_r * 0.9, id.colors[5]);
    if let (Some(neck), Some(rh), Some(lh)) = (skel.joints[1], skel.joints[8], skel.joints[11]) {
        let mid = Joint {
            x: (rh.x + lh.x) / 2.0,
            y: (rh.y + lh.y) / 2.0,
        };
        caps.push(Capsule {
            a: neck,
            b: mid,
            radius: id.torso_radius * u,
            color: id.colors[1],
        });
    }
    push_bone(&mut caps, skel, 1, 0, id.head_radius * u, id.colors[0]);
    push_bone(&mut caps, skel, 0, 14, limb_r * 0.45, id.colors[6]);
    push_bone(&mut caps, skel, 0, 15, limb_r * 0.45, id.colors[6]);
    push_bone(&mut caps, skel, 14, 16, limb_r * 0.45, id.colors[6]);
    push_bone(&mut caps, skel, 15, 17, limb_r * 0.45, id.colors[6]);
    push_bone(&mut caps, skel, 2, 3, limb_r, id.colors[2]);
    push_bone(&mut caps, skel, 3, 4, limb_r * 0.9, id.colors[2]);
    push_bone(&mut caps, skel, 5, 6, limb_r, id.colors[3]);
    push_bone(&mut caps, skel, 6, 7, limb_r * 0.9, id.colors[3]);
    caps
}

/// Render a skeleton under an identity: textured background plus
/// anti-aliased colored capsules per bone.
pub fn render_figure(id: &Identity, skel: &Skeleton, h: usize, w: usize) -> Tensor<f64> {
    let plane = h * w;
    let mut canvas = vec![0.0f64; 3 * plane];
    for iy in 0..h {
        for ix in 0..w {
            let c = background_at(id, ix as f64, iy as f64, h, w);
            for ch in 0..3 {
                canvas[ch * plane + iy * w + ix] = c[ch];
            }
        }
    }
    let u = h.min(w) as f64;
    for cap in figure_capsules(id, skel, u) {
        paint(&mut canvas, h, w, &cap);
    }
    Tensor::from_vec(vec![3, h, w], canvas).expect("canvas shape is valid")
}

/// Binary-disk heatmap encoding: channel `j` is 1 inside a disk of `radius`
/// pixels around joint `j`, 0 elsewhere; absent joints give zero channels.
pub fn joints_to_heatmap<S: Scalar>(
    skel: &Skeleton,
    h: usize,
    w: usize,
    radius: f64,
) -> Tensor<S> {
    let plane = h * w;
    let mut data = vec![S::zero(); JOINT_COUNT * plane];
    let r2 = radius * radius;
    for (j, joint) in skel.joints.iter().enumerate() {
        let Some(p) = joint else { continue };
        let x0 = ((p.x - radius).floor().max(0.0)) as usize;
        let x1 = ((p.x + radius).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((p.y - radius).floor().max(0.0)) as usize;
        let y1 = ((p.y + radius).ceil().min(h as f64 - 1.0)) as usize;
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let dx = ix as f64 - p.x;
                let dy = iy as f64 - p.y;
                if dx * dx + dy * dy <= r2 {
                    data[j * plane + iy * w + ix] = S::one();
                }
            }
        }
    }
    Tensor::from_vec(vec![JOINT_COUNT, h, w], data).expect("heatmap shape is valid")
}

/// Split an 18-channel heatmap into 18 sub-poses. Sub-pose `i` keeps channel
/// `i` plus the channels of joints adjacent to `i` in [`SKELETON_EDGES`];
/// all other channels are zeroed, so shapes stay uniform.
pub fn decompose_subposes<S: Scalar>(p: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    let s = p.shape();
    if s.len() != 3 || s[0] != JOINT_COUNT {
        return Err(Error::shape(format!(
            "sub-pose decomposition needs an {JOINT_COUNT}-channel heatmap, got {s:?}"
        )));
    }
    let plane = s[1] * s[2];
    let mut out = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let mut keep = vec![false; JOINT_COUNT];
        keep[j] = true;
        for n in joint_neighbors(j) {
            keep[n] = true;
        }
        let mut data = vec![S::zero(); JOINT_COUNT * plane];
        for (ch, &k) in keep.iter().enumerate() {
            if k {
                data[ch * plane..(ch + 1) * plane]
                    .copy_from_slice(&p.data()[ch * plane..(ch + 1) * plane]);
            }
        }
        out.push(Tensor::from_vec(s.to_vec(), data)?);
    }
    Ok(out)
}

/// Grayscale visualization of a heatmap: max over channels on all three
/// image channels.
pub fn heatmap_to_gray<S: Scalar>(p: &Tensor<S>) -> Result<Tensor<f64>> {
    let s = p.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("heatmap must be rank 3, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut gray = vec![0.0f64; plane];
    for ch in 0..s[0] {
        for i in 0..plane {
            gray[i] = gray[i].max(p.data()[ch * plane + i].as_f64());
        }
    }
    let mut data = Vec::with_capacity(3 * plane);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Tensor::from_vec(vec![3, s[1], s[2]], data)
}

/// Concatenate `[3,h,w]` images horizontally with a white gap between them
/// (sample-grid rendering).
pub fn hcat_images(imgs: &[Tensor<f64>], gap: usize) -> Result<Tensor<f64>> {
    if imgs.is_empty() {
        return Err(Error::contract("hcat of zero images"));
    }
    let h = imgs[0].shape()[1];
    for img in imgs {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != h {
            return Err(Error::shape(format!(
                "hcat needs [3,{h},w] images, got {s:?}"
            )));
        }
    }
    let total_w: usize =
        imgs.iter().map(|i| i.shape()[2]).sum::<usize>() + gap * (imgs.len() - 1);
    let mut data = vec![1.0f64; 3 * h * total_w];
    let mut x_off = 0usize;
    for img in imgs {
        let w = img.shape()[2];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[ch * h * total_w + y * total_w + x_off + x] =
                        img.data()[ch * h * w + y * w + x];
                }
            }
        }
        x_off += w + gap;
    }
    Tensor::from_vec(vec![3, h, total_w], data)
}

// ---- PPM image files -----------------------------------------------------

/// Write a `[3,h,w]` image with values in `[0,1]` as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("ppm needs a [3,h,w] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..plane {
        for ch in 0..3 {
            let v = (img.data()[ch * plane + i] * 255.0).round().clamp(0.0, 255.0);
            bytes.push(v as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PPM into a `[3,h,w]` image with values in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                path: String::new(),
                reason: "truncated header".to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes).map_err(|_| bad("missing magic"))? != "P6" {
        return Err(bad("not a P6 ppm"));
    }
    let w: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let h: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: usize = token(&bytes)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only 8-bit ppm supported"));
    }
    pos += 1; // single whitespace after maxval
    let plane = h * w;
    if bytes.len() < pos + 3 * plane {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0f64; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = bytes[pos + 3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

// ---- skeleton files --------------------------------------------------------

/// Serialize as one `joint-index x y visible` line per joint. Coordinates use
/// the shortest exact decimal form, so parsing recovers them bit-for-bit.
pub fn skeleton_to_string(skel: &Skeleton) -> String {
    let mut out = String::new();
    for (j, joint) in skel.joints.iter().enumerate() {
        match joint {
            Some(p) => writeln!(out, "{j} {} {} 1", p.x, p.y).unwrap(),
            None => writeln!(out, "{j} 0 0 0").unwrap(),
        }
    }
    out
}

pub fn skeleton_from_str(text: &str, origin: &str) -> Result<Skeleton> {
    let bad = |reason: String| Error::Format {
        path: origin.to_string(),
        reason,
    };
    let mut skel = Skeleton::empty();
    let mut seen = [false; JOINT_COUNT];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {line:?}")));
        }
        let j: usize = fields[0].parse().map_err(|_| bad(format!("bad joint index {line:?}")))?;
        if j >= JOINT_COUNT {
            return Err(bad(format!("joint index {j} out of range")));
        }
        let x: f64 = fields[1].parse().map_err(|_| bad(format!("bad x in {line:?}")))?;
        let y: f64 = fields[2].parse().map_err(|_| bad(format!("bad y in {line:?}")))?;
        let v: u8 = fields[3].parse().map_err(|_| bad(format!("bad flag in {line:?}")))?;
        skel.joints[j] = if v == 1 { Some(Joint { x, y }) } else { None };
        seen[j] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("skeleton file does not list all 18 joints".to_string()));
    }
    Ok(skel)
}

pub fn write_skeleton(path: &Path, skel: &Skeleton) -> Result<()> {
    fs::write(path, skeleton_to_string(skel)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    skeleton_from_str(&text, &path.display().to_string())
}

// ---- corpus ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One loaded pair: images in `[0,1]`, plus ground-truth skeletons.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub stem: String,
    pub split: Split,
    pub image_a: Tensor<f64>,
    pub image_b: Tensor<f64>,
    pub skel_a: Skeleton,
    pub skel_b: Skeleton,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SamplePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetSummary {
    pub pairs: usize,
    pub train: usize,
    pub test: usize,
}

/// Generate and write a corpus. Of the `n_pairs` pairs, the last `n_test`
/// are tagged `test`. Fully reproducible from `seed`.
pub fn make_dataset(
    n_pairs: usize,
    n_test: usize,
    seed: u64,
    h: usize,
    w: usize,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    if n_pairs == 0 || n_test > n_pairs {
        return Err(Error::Config(format!(
            "invalid pair counts: {n_pairs} total, {n_test} test"
        )));
    }
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("image size {h}x{w} below 16x16 minimum")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    let digits = 5usize;
    for i in 0..n_pairs {
        let identity_seed: u64 = rng.gen();
        let pose_seed_a: u64 = rng.gen();
        let pose_seed_b: u64 = rng.gen();
        let id = synth_identity(identity_seed);
        let (skel_a, img_a) = synth_pose(&id, pose_seed_a, h, w);
        let (skel_b, img_b) = synth_pose(&id, pose_seed_b, h, w);
        let stem = format!("pair_{i:0digits$}");
        write_ppm(&out_dir.join(format!("{stem}_ia.ppm")), &img_a)?;
        write_ppm(&out_dir.join(format!("{stem}_ib.ppm")), &img_b)?;
        write_skeleton(&out_dir.join(format!("{stem}_a.skel")), &skel_a)?;
        write_skeleton(&out_dir.join(format!("{stem}_b.skel")), &skel_b)?;
        let split = if i >= n_pairs - n_test {
            Split::Test
        } else {
            Split::Train
        };
        writeln!(manifest, "{stem} {}", split.tag()).unwrap();
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(DatasetSummary {
        pairs: n_pairs,
        train: n_pairs - n_test,
        test: n_test,
    })
}

/// Load a corpus directory written by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let stem = fields.next().ok_or_else(|| Error::Format {
            path: manifest_path.display().to_string(),
            reason: format!("bad manifest line {line:?}"),
        })?;
        let split = match fields.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => {
                return Err(Error::Format {
                    path: manifest_path.display().to_string(),
                    reason: format!("bad split tag {other:?} in line {line:?}"),
                })
            }
        };
        let image_a = read_ppm(&dir.join(format!("{stem}_ia.ppm")))?;
        let image_b = read_ppm(&dir.join(format!("{stem}_ib.ppm")))?;
        let skel_a = read_skeleton(&dir.join(format!("{stem}_a.skel")))?;
        let skel_b = read_skeleton(&dir.join(format!("{stem}_b.skel")))?;
        let s = image_a.shape();
        let this = (s[1], s[2]);
        match size {
            None => size = Some(this),
            Some(prev) if prev != this => {
                return Err(Error::Mismatch(format!(
                    "corpus mixes image sizes {prev:?} and {this:?}"
                )))
            }
            _ => {}
        }
        pairs.push(SamplePair {
            stem: stem.to_string(),
            split,
            image_a,
            image_b,
            skel_a,
            skel_b,
        });
    }
    let (height, width) = size.ok_or_else(|| Error::Format {
        path: manifest_path.display().to_string(),
        reason: "empty manifest".to_string(),
    })?;
    Ok(Dataset {
        pairs,
        height,
        width,
    })
}

/// Map a `[0,1]` image to the `[-1,1]` model range in element type `S`.
pub fn to_model_range<S: Scalar>(img: &Tensor<f64>) -> Tensor<S> {
    Tensor::from_f64_tensor(&img.map(|v| v * 2.0 - 1.0))
}

/// Map a `[-1,1]` model image back to `[0,1]` (clamped).
pub fn from_model_range<S: Scalar>(img: &Tensor<S>) -> Tensor<f64> {
    img.to_f64().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}
