//! Small fully connected networks with tanh hidden layers and manual
//! backpropagation over column batches.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Raw affine output.
    Identity,
    /// `center + half_width * tanh(z)`, always inside the output box.
    Squash,
}

/// Inputs are normalized as `(x - in_center) / in_scale` before the first
/// layer. Parameters are stored flat: per layer the weight matrix
/// (column-major, `out x in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    in_center: Vec<f64>,
    in_scale: Vec<f64>,
    out_center: Vec<f64>,
    out_half: Vec<f64>,
    params: Vec<f64>,
}

/// Intermediate activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    // acts[0] is the normalized input, acts[l] the output of hidden layer l
    acts: Vec<DMatrix<f64>>,
    squashed: Option<DMatrix<f64>>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn box_center_scale(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let s = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
    (c, s)
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. `input_box` fixes the input
    /// normalization; `output_box` is required for [`Head::Squash`].
    pub fn new<R: Rng>(
        sizes: &[usize],
        head: Head,
        input_box: (&[f64], &[f64]),
        output_box: Option<(&[f64], &[f64])>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, head, input_box, output_box)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1]] {
                *p = rng.gen_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(
        sizes: &[usize],
        head: Head,
        input_box: (&[f64], &[f64]),
        output_box: Option<(&[f64], &[f64])>,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let (n_in, n_out) = (sizes[0], sizes[sizes.len() - 1]);
        if input_box.0.len() != n_in || input_box.1.len() != n_in {
            return Err(Error::Dimension("input box does not match the input layer".into()));
        }
        let (in_center, mut in_scale) = box_center_scale(input_box.0, input_box.1);
        // degenerate input coordinates are passed through unscaled
        for s in &mut in_scale {
            if !(*s > 0.0) {
                *s = 1.0;
            }
        }
        let (out_center, out_half) = match (head, output_box) {
            (Head::Squash, Some((lo, hi))) => {
                if lo.len() != n_out || hi.len() != n_out {
                    return Err(Error::Dimension("output box does not match the output layer".into()));
                }
                box_center_scale(lo, hi)
            }
            (Head::Squash, None) => {
                return Err(Error::Config("a squashed head needs an output box".into()))
            }
            (Head::Identity, _) => (vec![0.0; n_out], vec![1.0; n_out]),
        };
        Ok(Self {
            sizes: sizes.to_vec(),
            head,
            in_center,
            in_scale,
            out_center,
            out_half,
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Output box of a squashed head.
    pub fn output_box(&self) -> (Vec<f64>, Vec<f64>) {
        let lo = self.out_center.iter().zip(&self.out_half).map(|(c, h)| c - h).collect();
        let hi = self.out_center.iter().zip(&self.out_half).map(|(c, h)| c + h).collect();
        (lo, hi)
    }

    fn layer(&self, l: usize, off: usize) -> (DMatrixView<'_, f64>, DMatrixView<'_, f64>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = DMatrixView::from_slice(&self.params[off..off + n_in * n_out], n_out, n_in);
        let b = DMatrixView::from_slice(&self.params[off + n_in * n_out..off + n_in * n_out + n_out], n_out, 1);
        (w, b)
    }

    /// Forward pass on a batch (one column per sample).
    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Tape) {
        assert_eq!(x.nrows(), self.input_dim(), "input dimension");
        let mut a = x.clone();
        for (i, mut row) in a.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.in_center[i]) / self.in_scale[i]);
        }
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            let (w, b) = self.layer(l, off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
            let mut z = &w * &a;
            for mut col in z.column_iter_mut() {
                col += &b.column(0);
            }
            acts.push(a);
            if l + 1 < n_layers {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        match self.head {
            Head::Identity => (a, Tape { acts, squashed: None }),
            Head::Squash => {
                let t = a.map(f64::tanh);
                let mut y = t.clone();
                for (i, mut row) in y.row_iter_mut().enumerate() {
                    row.apply(|v| *v = self.out_center[i] + self.out_half[i] * *v);
                }
                (y, Tape { acts, squashed: Some(t) })
            }
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).0
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.predict(&DMatrix::from_column_slice(x.len(), 1, x))
            .iter()
            .copied()
            .collect()
    }

    /// Gradients of `sum(dy .* y)` with respect to the parameters and to the
    /// (unnormalized) input.
    pub fn backward(&self, tape: &Tape, dy: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut dz = match (&self.head, &tape.squashed) {
            (Head::Squash, Some(t)) => {
                let mut dz = dy.clone();
                for c in 0..dz.ncols() {
                    for r in 0..dz.nrows() {
                        let tv = t[(r, c)];
                        dz[(r, c)] *= self.out_half[r] * (1.0 - tv * tv);
                    }
                }
                dz
            }
            _ => dy.clone(),
        };
        let n_layers = self.sizes.len() - 1;
        let offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(o)
            })
            .collect();
        let mut dinput = DMatrix::zeros(0, 0);
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let a_prev = &tape.acts[l];
            let gw = &dz * a_prev.transpose();
            grad[off..off + n_in * n_out].copy_from_slice(gw.as_slice());
            let gb: DVector<f64> = dz.column_sum();
            grad[off + n_in * n_out..off + n_in * n_out + n_out].copy_from_slice(gb.as_slice());
            let (w, _) = self.layer(l, off);
            let mut da = w.transpose() * &dz;
            if l > 0 {
                da.zip_apply(a_prev, |g, a| *g *= 1.0 - a * a);
                dz = da;
            } else {
                for (i, mut row) in da.row_iter_mut().enumerate() {
                    row /= self.in_scale[i];
                }
                dinput = da;
            }
        }
        (grad, dinput)
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }

    /// Layout, little endian: magic `RANET001`; `u32` layer count `L` and
    /// `L` `u32` sizes; `u8` head (0 identity, 1 squash); `f64` input center
    /// and scale (`sizes[0]` each); `f64` output center and half-width
    /// (`sizes[L-1]` each); `u64` parameter count and the `f64` parameters.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for s in &self.sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.head == Head::Squash)])?;
        for v in self
            .in_center
            .iter()
            .chain(&self.in_scale)
            .chain(&self.out_center)
            .chain(&self.out_half)
        {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Format("not a network file".into()));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let sizes = (0..n).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut head = [0u8; 1];
        r.read_exact(&mut head)?;
        let head = match head[0] {
            0 => Head::Identity,
            1 => Head::Squash,
            h => return Err(Error::Format(format!("unknown head tag {h}"))),
        };
        let (n_in, n_out) = (sizes[0], sizes[n - 1]);
        let mut read_vec = |len: usize| (0..len).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>();
        let in_center = read_vec(n_in)?;
        let in_scale = read_vec(n_in)?;
        let out_center = read_vec(n_out)?;
        let out_half = read_vec(n_out)?;
        let count = {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            u64::from_le_bytes(b) as usize
        };
        if count != param_count(&sizes) {
            return Err(Error::Format(format!(
                "parameter count {count} does not match sizes {sizes:?}"
            )));
        }
        let params = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sizes,
            head,
            in_center,
            in_scale,
            out_center,
            out_half,
            params,
        })
    }
}

const NET_MAGIC: &[u8; 8] = b"RANET001";

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// A network used as a state-feedback policy.
impl Policy for Mlp {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
    }
}
