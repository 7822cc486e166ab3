//! Layers built on the tape: linear maps, normalized MLP blocks, a
//! layer-normalized GRU cell and the strided convolution stacks of the
//! pixel path.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`], so one
//! store can be snapshotted, checkpointed or swapped independently.

use rand::Rng;

use crate::diff::{conv_out_size, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

const LN_EPS: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert_glorot(format!("{name}/w"), &[inputs, outputs], inputs, outputs, rng)?;
        let b = if bias {
            Some(store.insert(format!("{name}/b"), Tensor::zeros(&[outputs]))?)
        } else {
            None
        };
        Ok(Self { w, b, inputs, outputs })
    }

    /// All-zero weights and bias. Used for output heads whose initial
    /// prediction should be exactly neutral.
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}/w"), Tensor::zeros(&[inputs, outputs]))?;
        let b = store.insert(format!("{name}/b"), Tensor::zeros(&[outputs]))?;
        Ok(Self {
            w,
            b: Some(b),
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learned per-feature gain and bias after a parameter-free layer norm.
#[derive(Clone, Debug)]
pub struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}/gain"), Tensor::full(&[width], T::one()))?,
            bias: store.insert(format!("{name}/bias"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, c(LN_EPS));
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// `silu(norm(x W))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub linear: Linear,
    norm: Norm,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, inputs, outputs, false, rng)?,
            norm: Norm::new(store, &format!("{name}/norm"), outputs)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(g, store, x)?;
        let y = self.norm.forward(g, store, y)?;
        Ok(g.silu(y))
    }
}

/// Stack of [`Block`]s followed by an optional plain linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub blocks: Vec<Block>,
    pub head: Option<Linear>,
}

/// Output layer initialization for [`Mlp::new`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    None,
    Random(usize),
    Zero(usize),
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: &[usize],
        head: Head,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut width = inputs;
        for (i, &h) in hidden.iter().enumerate() {
            blocks.push(Block::new(store, &format!("{name}/l{i}"), width, h, rng)?);
            width = h;
        }
        let head = match head {
            Head::None => None,
            Head::Random(n) => Some(Linear::new(store, &format!("{name}/out"), width, n, true, rng)?),
            Head::Zero(n) => Some(Linear::zeros(store, &format!("{name}/out"), width, n)?),
        };
        Ok(Self { blocks, head })
    }

    pub fn out_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.outputs,
            None => self.blocks.last().map_or(0, |b| b.linear.outputs),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        match &self.head {
            Some(h) => h.forward(g, store, x),
            None => Ok(x),
        }
    }
}

/// GRU with one fused projection and layer norm:
///
/// ```text
/// [r, c, u] = norm([x, h] W)
/// h' = σ(u - 1) ⊙ tanh(σ(r) ⊙ c) + (1 - σ(u - 1)) ⊙ h
/// ```
///
/// The `-1` shift biases the update gate towards keeping `h` at init.
#[derive(Clone, Debug)]
pub struct GruCell {
    linear: Linear,
    norm: Norm,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, inputs + hidden, 3 * hidden, false, rng)?,
            norm: Norm::new(store, &format!("{name}/norm"), 3 * hidden)?,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let d = self.hidden;
        let xh = g.concat(&[x, h])?;
        let parts = self.linear.forward(g, store, xh)?;
        let parts = self.norm.forward(g, store, parts)?;
        let r = g.slice(parts, 0, d)?;
        let cand = g.slice(parts, d, d)?;
        let u = g.slice(parts, 2 * d, d)?;
        let reset = g.sigmoid(r);
        let rc = g.mul(reset, cand)?;
        let cand = g.tanh(rc);
        let u = g.add_scalar(u, -T::one());
        let update = g.sigmoid(u);
        let keep = g.neg(update);
        let keep = g.add_scalar(keep, T::one());
        let new = g.mul(update, cand)?;
        let old = g.mul(keep, h)?;
        g.add(new, old)
    }
}

/// Stride-2 valid convolutions with channel bias and SiLU, flattened at the
/// end. Channel counts double per layer.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    layers: Vec<(ParamId, ParamId)>,
    pub in_shape: [usize; 3],
    pub out_dim: usize,
}

pub const ENCODER_KERNELS: [usize; 4] = [6, 4, 4, 4];
pub const DECODER_KERNELS: [usize; 4] = [4, 4, 4, 6];

impl ConvEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_shape: [usize; 3],
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [mut ch, mut size, w] = in_shape;
        if size != w {
            return Err(Error::Config(format!("conv encoder needs square input, got {in_shape:?}")));
        }
        let mut layers = Vec::new();
        for (i, &k) in ENCODER_KERNELS.iter().enumerate() {
            if size < k {
                return Err(Error::Config(format!("input {size} too small for kernel {k}")));
            }
            let out = depth << i;
            let wt = store.insert_glorot(
                format!("{name}/conv{i}/w"),
                &[out, ch, k, k],
                ch * k * k,
                out * k * k,
                rng,
            )?;
            let b = store.insert(format!("{name}/conv{i}/b"), Tensor::zeros(&[out]))?;
            layers.push((wt, b));
            ch = out;
            size = conv_out_size(size, k, 2);
        }
        Ok(Self {
            layers,
            in_shape,
            out_dim: ch * size * size,
        })
    }

    /// `x: [B, C·H·W]` -> `[B, out_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let b = g.value(x).rows();
        let [ch, h, w] = self.in_shape;
        let mut y = g.reshape(x, &[b, ch, h, w])?;
        for &(wt, bias) in &self.layers {
            let wt = g.param(store, wt);
            let bias = g.param(store, bias);
            y = g.conv2d(y, wt, 2)?;
            y = g.add_channel(y, bias)?;
            y = g.silu(y);
        }
        g.reshape(y, &[b, self.out_dim])
    }
}

/// Mirror of [`ConvEncoder`]: a linear map to a `2×2` feature map followed
/// by stride-2 transposed convolutions up to the image size.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    input: Linear,
    layers: Vec<(ParamId, ParamId)>,
    seed_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

impl ConvDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        out_shape: [usize; 3],
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = DECODER_KERNELS.len();
        let seed_ch = depth << (n - 1);
        let mut size = 2;
        for &k in &DECODER_KERNELS {
            size = (size - 1) * 2 + k;
        }
        if [out_shape[1], out_shape[2]] != [size, size] {
            return Err(Error::Config(format!(
                "conv decoder produces {size}x{size} images, configured {out_shape:?}"
            )));
        }
        let input = Linear::new(store, &format!("{name}/in"), inputs, seed_ch * 4, true, rng)?;
        let mut layers = Vec::new();
        let mut ch = seed_ch;
        for (i, &k) in DECODER_KERNELS.iter().enumerate() {
            let out = if i + 1 == n { out_shape[0] } else { ch / 2 };
            let wt = store.insert_glorot(
                format!("{name}/deconv{i}/w"),
                &[ch, out, k, k],
                ch * k * k,
                out * k * k,
                rng,
            )?;
            let b = store.insert(format!("{name}/deconv{i}/b"), Tensor::zeros(&[out]))?;
            layers.push((wt, b));
            ch = out;
        }
        Ok(Self {
            input,
            layers,
            seed_shape: [seed_ch, 2, 2],
            out_shape,
        })
    }

    /// `[B, inputs]` -> `[B, C·H·W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let b = g.value(x).rows();
        let y = self.input.forward(g, store, x)?;
        let [c0, h0, w0] = self.seed_shape;
        let mut y = g.reshape(y, &[b, c0, h0, w0])?;
        for &(wt, bias) in &self.layers {
            y = g.silu(y);
            let wt = g.param(store, wt);
            let bias = g.param(store, bias);
            y = g.conv_transpose2d(y, wt, 2)?;
            y = g.add_channel(y, bias)?;
        }
        let [c1, h1, w1] = self.out_shape;
        g.reshape(y, &[b, c1 * h1 * w1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(g: &mut Graph<f64>, rows: usize, cols: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.constant(Tensor::new(vec![rows, cols], data).unwrap())
    }

    #[test]
    fn gru_unrolled_five_steps_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        let report = grad_check(&mut store, &GradCheckOptions::new(1e-4), |s, g| {
            let mut h = g.constant(Tensor::zeros(&[2, 4]));
            for t in 0..5 {
                let x = input(g, 2, 3, t);
                h = cell.forward(g, s, x, h)?;
            }
            let sq = g.square(h);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn gru_state_stays_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 5, 8, &mut rng).unwrap();
        let mut g = Graph::no_grad();
        let mut h = g.constant(Tensor::zeros(&[3, 8]));
        for t in 0..50 {
            let x = input(&mut g, 3, 5, t);
            let x = g.scale(x, 50.0);
            h = cell.forward(&mut g, &store, x, h).unwrap();
            assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn mlp_and_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", 4, &[8, 8], Head::Zero(3), &mut rng).unwrap();
        assert_eq!(mlp.out_dim(), 3);
        let mut g = Graph::new();
        let x = input(&mut g, 5, 4, 0);
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[5, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let report = grad_check(&mut store, &GradCheckOptions::new(1e-4), |s, g| {
            let x = input(g, 5, 4, 0);
            let y = mlp.forward(g, s, x)?;
            let t = g.tanh(y);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn conv_stack_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let enc = ConvEncoder::new(&mut store, "enc", [3, 64, 64], 2, &mut rng).unwrap();
        assert_eq!(enc.out_dim, 16 * 2 * 2);
        let dec = ConvDecoder::new(&mut store, "dec", 10, [3, 64, 64], 2, &mut rng).unwrap();
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::full(&[2, 3 * 64 * 64], 0.5));
        let y = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 64]);
        let z = g.constant(Tensor::full(&[2, 10], 0.1));
        let img = dec.forward(&mut g, &store, z).unwrap();
        assert_eq!(g.shape(img), &[2, 3 * 64 * 64]);
    }
}
