//! Channel tensor shared by the generators and the evaluators.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

pub type CMat = DMatrix<Complex64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite coefficient at (t={t}, f={f}, rx={rx}, tx={tx})")]
    NonFinite {
        t: usize,
        f: usize,
        rx: usize,
        tx: usize,
    },
}

/// Complex coefficients indexed `(time, subcarrier, rx port, tx port)`,
/// stored row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    times: Vec<f64>,
    freqs: Vec<f64>,
    n_rx: usize,
    n_tx: usize,
    data: Vec<Complex64>,
}

impl ChannelTensor {
    pub fn zeros(times: Vec<f64>, freqs: Vec<f64>, n_rx: usize, n_tx: usize) -> Self {
        let len = times.len() * freqs.len() * n_rx * n_tx;
        Self {
            times,
            freqs,
            n_rx,
            n_tx,
            data: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn from_raw(
        times: Vec<f64>,
        freqs: Vec<f64>,
        n_rx: usize,
        n_tx: usize,
        data: Vec<Complex64>,
    ) -> Result<Self, TensorError> {
        let want = times.len() * freqs.len() * n_rx * n_tx;
        if data.len() != want {
            return Err(TensorError::ShapeMismatch(format!(
                "{} coefficients for a {}x{}x{}x{} tensor",
                data.len(),
                times.len(),
                freqs.len(),
                n_rx,
                n_tx
            )));
        }
        let t = Self {
            times,
            freqs,
            n_rx,
            n_tx,
            data,
        };
        t.check_finite()?;
        Ok(t)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_rx(&self) -> usize {
        self.n_rx
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, t: usize, f: usize) -> usize {
        (t * self.freqs.len() + f) * self.n_rx * self.n_tx
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize, rx: usize, tx: usize) -> Complex64 {
        self.data[self.offset(t, f) + rx * self.n_tx + tx]
    }

    #[inline]
    pub fn set(&mut self, t: usize, f: usize, rx: usize, tx: usize, v: Complex64) {
        let o = self.offset(t, f);
        self.data[o + rx * self.n_tx + tx] = v;
    }

    /// Row-major `n_rx × n_tx` block at `(t, f)`.
    pub fn slice(&self, t: usize, f: usize) -> &[Complex64] {
        let o = self.offset(t, f);
        &self.data[o..o + self.n_rx * self.n_tx]
    }

    pub fn slice_mut(&mut self, t: usize, f: usize) -> &mut [Complex64] {
        let o = self.offset(t, f);
        let n = self.n_rx * self.n_tx;
        &mut self.data[o..o + n]
    }

    /// Channel matrix `H(t, f)` with rows indexed by rx port.
    pub fn matrix(&self, t: usize, f: usize) -> CMat {
        CMat::from_row_slice(self.n_rx, self.n_tx, self.slice(t, f))
    }

    pub fn set_matrix(&mut self, t: usize, f: usize, m: &CMat) -> Result<(), TensorError> {
        if m.nrows() != self.n_rx || m.ncols() != self.n_tx {
            return Err(TensorError::ShapeMismatch(format!(
                "{}x{} matrix into {}x{} slot",
                m.nrows(),
                m.ncols(),
                self.n_rx,
                self.n_tx
            )));
        }
        let n_tx = self.n_tx;
        let s = self.slice_mut(t, f);
        for r in 0..m.nrows() {
            for c in 0..n_tx {
                s[r * n_tx + c] = m[(r, c)];
            }
        }
        Ok(())
    }

    /// Keeps only the listed time samples.
    pub fn select_times(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(
            idx.iter().map(|&i| self.times[i]).collect(),
            self.freqs.clone(),
            self.n_rx,
            self.n_tx,
        );
        for (k, &i) in idx.iter().enumerate() {
            for f in 0..self.freqs.len() {
                out.slice_mut(k, f).copy_from_slice(self.slice(i, f));
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        if let Some(pos) = self.data.iter().position(|c| !c.re.is_finite() || !c.im.is_finite()) {
            let per_f = self.n_rx * self.n_tx;
            let per_t = per_f * self.freqs.len();
            return Err(TensorError::NonFinite {
                t: pos / per_t,
                f: (pos % per_t) / per_f,
                rx: (pos % per_f) / self.n_tx,
                tx: pos % self.n_tx,
            });
        }
        Ok(())
    }

    /// Mean of `|h|²` over all entries.
    pub fn mean_power(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }
}

/// Largest entry magnitude of a complex matrix.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_round_trip() {
        let mut h = ChannelTensor::zeros(vec![0.0, 1.0], vec![0.0, 1.0, 2.0], 2, 3);
        h.set(1, 2, 1, 0, Complex64::new(3.0, -1.0));
        assert_eq!(h.get(1, 2, 1, 0), Complex64::new(3.0, -1.0));
        let m = h.matrix(1, 2);
        assert_eq!(m[(1, 0)], Complex64::new(3.0, -1.0));
        assert_eq!(h.data().iter().filter(|c| c.norm() > 0.0).count(), 1);
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(ChannelTensor::from_raw(vec![0.0], vec![0.0], 2, 2, vec![Complex64::new(0.0, 0.0); 3]).is_err());
        let mut d = vec![Complex64::new(0.0, 0.0); 4];
        d[3] = Complex64::new(f64::NAN, 0.0);
        let e = ChannelTensor::from_raw(vec![0.0], vec![0.0], 2, 2, d).unwrap_err();
        assert_eq!(e, TensorError::NonFinite { t: 0, f: 0, rx: 1, tx: 1 });
    }

    #[test]
    fn set_matrix_checks_shape() {
        let mut h = ChannelTensor::zeros(vec![0.0], vec![0.0], 2, 2);
        assert!(h.set_matrix(0, 0, &CMat::zeros(3, 2)).is_err());
        let m = CMat::from_fn(2, 2, |r, c| Complex64::new(r as f64, c as f64));
        h.set_matrix(0, 0, &m).unwrap();
        assert_eq!(h.matrix(0, 0), m);
    }
}
