//! Unnormalized DFTs on periodic grids of dimension 1 or 2.
//!
//! Real data map to a half spectrum along the last axis: length `n/2 + 1`
//! in d = 1, `n × (n/2 + 1)` row-major in d = 2.

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

#[derive(Clone)]
pub struct FftPlan {
    d: usize,
    n: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FftPlan(d={}, n={})", self.d, self.n)
    }
}

impl FftPlan {
    pub fn new(d: usize, n: usize) -> Self {
        assert!(d == 1 || d == 2, "FFT plans exist for d ∈ {{1, 2}}");
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self {
            d,
            n,
            r2c: rp.plan_fft_forward(n),
            c2r: rp.plan_fft_inverse(n),
            fwd: cp.plan_fft_forward(n),
            inv: cp.plan_fft_inverse(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sites(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    fn h2(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn half_len(&self) -> usize {
        if self.d == 1 {
            self.h2()
        } else {
            self.n * self.h2()
        }
    }

    /// Number of full-spectrum frequencies represented by a half-spectrum slot.
    pub fn multiplicity(&self, idx: usize) -> f64 {
        let k2 = idx % self.h2();
        if k2 == 0 || k2 == self.n / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Signed integer frequency pair of a half-spectrum slot (k1 = 0 in d = 1).
    pub fn frequency(&self, idx: usize) -> (i64, i64) {
        let n = self.n as i64;
        let wrap = |k: i64| if k > n / 2 { k - n } else { k };
        if self.d == 1 {
            (0, idx as i64)
        } else {
            (wrap((idx / self.h2()) as i64), (idx % self.h2()) as i64)
        }
    }

    pub fn r2c(&self, input: &[f64], out: &mut [Complex64]) {
        let n = self.n;
        let h2 = self.h2();
        if self.d == 1 {
            let mut buf = input.to_vec();
            self.r2c.process(&mut buf, out).expect("forward real FFT");
            return;
        }
        let mut row = vec![0.0; n];
        for i1 in 0..n {
            row.copy_from_slice(&input[i1 * n..(i1 + 1) * n]);
            self.r2c.process(&mut row, &mut out[i1 * h2..(i1 + 1) * h2]).expect("forward real FFT");
        }
        let mut col = vec![Complex64::default(); n];
        for k2 in 0..h2 {
            for i1 in 0..n {
                col[i1] = out[i1 * h2 + k2];
            }
            self.fwd.process(&mut col);
            for i1 in 0..n {
                out[i1 * h2 + k2] = col[i1];
            }
        }
    }

    pub fn c2r(&self, spec: &[Complex64], out: &mut [f64]) {
        let n = self.n;
        let h2 = self.h2();
        let mut buf = spec.to_vec();
        if self.d == 2 {
            let mut col = vec![Complex64::default(); n];
            for k2 in 0..h2 {
                for i1 in 0..n {
                    col[i1] = buf[i1 * h2 + k2];
                }
                self.inv.process(&mut col);
                for i1 in 0..n {
                    buf[i1 * h2 + k2] = col[i1];
                }
            }
        }
        let rows = if self.d == 1 { 1 } else { n };
        for i1 in 0..rows {
            let s = &mut buf[i1 * h2..(i1 + 1) * h2];
            s[0].im = 0.0;
            s[h2 - 1].im = 0.0;
            self.c2r.process(s, &mut out[i1 * n..(i1 + 1) * n]).expect("inverse real FFT");
        }
    }

    /// In-place forward complex DFT over all axes.
    pub fn fft_complex(&self, data: &mut [Complex64]) {
        let n = self.n;
        if self.d == 1 {
            self.fwd.process(data);
            return;
        }
        for i1 in 0..n {
            self.fwd.process(&mut data[i1 * n..(i1 + 1) * n]);
        }
        let mut col = vec![Complex64::default(); n];
        for i2 in 0..n {
            for i1 in 0..n {
                col[i1] = data[i1 * n + i2];
            }
            self.fwd.process(&mut col);
            for i1 in 0..n {
                data[i1 * n + i2] = col[i1];
            }
        }
    }

    /// Full-spectrum index of the slot `−k` for a full-spectrum index `k`.
    pub fn negate(&self, k: usize) -> usize {
        let n = self.n;
        if self.d == 1 {
            (n - k) % n
        } else {
            let (k1, k2) = (k / n, k % n);
            ((n - k1) % n) * n + (n - k2) % n
        }
    }

    /// Half-spectrum slot holding the (real, even) value at full index `k`.
    pub fn half_index(&self, k: usize) -> usize {
        let n = self.n;
        let h2 = self.h2();
        if self.d == 1 {
            if k < h2 {
                k
            } else {
                n - k
            }
        } else {
            let (k1, k2) = (k / n, k % n);
            if k2 < h2 {
                k1 * h2 + k2
            } else {
                ((n - k1) % n) * h2 + (n - k2)
            }
        }
    }
}
