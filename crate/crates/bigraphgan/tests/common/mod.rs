//! Independent oracles shared by the acceptance suite. Everything here is
//! deliberately written with plain loops and its own small matrix type so it
//! shares no code with the implementation paths it checks.

#![allow(dead_code)]

use bigraphgan::tensor::Tensor;

/// Naive row-major matrix for the dense-algebra oracle.
#[derive(Debug, Clone)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(r: usize, c: usize) -> Self {
        Mat {
            r,
            c,
            data: vec![0.0; r * c],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_tensor(t: &Tensor<f64>, r: usize, c: usize) -> Self {
        assert_eq!(t.len(), r * c);
        Mat {
            r,
            c,
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.c + j]
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.c, other.r);
        let mut out = Mat::zeros(self.r, other.c);
        for i in 0..self.r {
            for j in 0..other.c {
                let mut acc = 0.0;
                for p in 0..self.c {
                    acc += self.at(i, p) * other.at(p, j);
                }
                out.data[i * other.c + j] = acc;
            }
        }
        out
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.data[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (other.r, other.c));
        Mat {
            r: self.r,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (other.r, other.c));
        Mat {
            r: self.r,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Add a per-row constant (1x1 convolution bias over a flattened grid).
    pub fn add_row_bias(&self, bias: &[f64]) -> Mat {
        assert_eq!(bias.len(), self.r);
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.data[i * self.c + j] += bias[i];
            }
        }
        out
    }
}

/// Weights of one 1x1 convolution as a plain matrix plus bias.
pub struct Lin {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Lin {
    /// From a `[c_out, c_in, 1, 1]` kernel tensor and `[c_out]` bias tensor.
    pub fn from_conv1x1(kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Self {
        let s = kernel.shape();
        assert_eq!(s[2], 1);
        assert_eq!(s[3], 1);
        Lin {
            w: Mat {
                r: s[0],
                c: s[1],
                data: kernel.data().to_vec(),
            },
            b: bias.data().to_vec(),
        }
    }

    /// Apply to a `[c_in, l]` flattened grid.
    pub fn apply(&self, x: &Mat) -> Mat {
        self.w.mul(x).add_row_bias(&self.b)
    }
}

/// Dense matrix-algebra recomputation of one bipartite reasoning branch:
/// `H = theta(node)`, `V = H phi(feat)^T`, `M = (I - A) V W`,
/// `out = psi(unflatten(H^T M)) + feat`, all on flattened `[c, h*w]` grids.
pub struct BranchWeights {
    pub theta: Lin,
    pub phi: Lin,
    pub psi: Lin,
    pub adjacency: Mat,
    pub edge_weights: Mat,
}

pub fn bgr_branch_oracle(feat: &Mat, node: &Mat, w: &BranchWeights) -> Mat {
    let h = w.theta.apply(node); // [n, l]
    let phi = w.phi.apply(feat); // [c', l]
    let v = h.mul(&phi.t()); // [n, c']
    let n = w.adjacency.r;
    let m = Mat::eye(n).sub(&w.adjacency).mul(&v).mul(&w.edge_weights); // [n, c']
    let back = h.t().mul(&m); // [l, c']
    let grid = back.t(); // [c', l]
    w.psi.apply(&grid).add(feat)
}

/// Direct (non-separable) windowed SSIM with a freshly derived Gaussian
/// window: the reference implementation for the metric fixtures.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let win_n = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0f64; win_n * win_n];
    let c = (win_n / 2) as f64;
    let mut sum = 0.0;
    for y in 0..win_n {
        for x in 0..win_n {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            win[y * win_n + x] = v;
            sum += v;
        }
    }
    for v in win.iter_mut() {
        *v /= sum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - win_n) {
            for x0 in 0..=(w - win_n) {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..win_n {
                    for wx in 0..win_n {
                        let kv = win[wy * win_n + wx];
                        let va = pa[(y0 + wy) * w + x0 + wx];
                        let vb = pb[(y0 + wy) * w + x0 + wx];
                        ma += kv * va;
                        mb += kv * vb;
                        maa += kv * va * va;
                        mbb += kv * vb * vb;
                        mab += kv * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}
