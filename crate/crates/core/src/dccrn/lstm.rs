use crate::error::{invalid, shape_err, Result};
use crate::nn::layers::sigmoid;
use crate::nn::{Init, Linear, ParamStore};
use candle_core::Tensor;

/// Recurrent state of a real LSTM, `h` and `c` are `[B, H]`.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Single-layer real LSTM (gate order i, f, g, o).
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    input: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.param(&format!("{name}.w_ih"), &[input, 4 * hidden], Init::Uniform(bound))?,
            w_hh: store.param(&format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::Uniform(bound))?,
            bias: store.param(&format!("{name}.bias"), &[4 * hidden], Init::Uniform(bound))?,
            input,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, like: &Tensor) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), like.dtype(), like.device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Runs over `[B, T, I]`, returning `[B, T, H]` and the final state.
    pub fn forward(&self, x: &Tensor, state: Option<LstmState>) -> Result<(Tensor, LstmState)> {
        let (b, t, i) = x.dims3()?;
        if i != self.input {
            return shape_err("lstm input", &[b, t, self.input], x.dims());
        }
        let mut st = match state {
            Some(s) => {
                if s.h.dims() != [b, self.hidden] || s.c.dims() != [b, self.hidden] {
                    return invalid(format!(
                        "incompatible lstm state {:?}, expected [{b}, {}]",
                        s.h.dims(),
                        self.hidden
                    ));
                }
                s
            }
            None => self.zero_state(b, x)?,
        };
        let h = self.hidden;
        let x_proj = x
            .reshape((b * t, i))?
            .matmul(&self.w_ih)?
            .broadcast_add(&self.bias)?
            .reshape((b, t, 4 * h))?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (x_proj.narrow(1, step, 1)?.squeeze(1)? + st.h.matmul(&self.w_hh)?)?;
            let ig = sigmoid(&gates.narrow(1, 0, h)?)?;
            let fg = sigmoid(&gates.narrow(1, h, h)?)?;
            let gg = gates.narrow(1, 2 * h, h)?.tanh()?;
            let og = sigmoid(&gates.narrow(1, 3 * h, h)?)?;
            let c = ((fg * &st.c)? + (ig * gg)?)?;
            let hn = (og * c.tanh()?)?;
            outputs.push(hn.unsqueeze(1)?);
            st = LstmState { h: hn, c };
        }
        Ok((Tensor::cat(&outputs, 1)?, st))
    }
}

/// Complex dense map: `y_r = W_r x_r - W_i x_i + b_r`,
/// `y_i = W_r x_i + W_i x_r + b_i`.
#[derive(Debug, Clone)]
pub struct ComplexLinear {
    real: Linear,
    imag: Linear,
    b_real: Tensor,
    b_imag: Tensor,
}

impl ComplexLinear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            real: Linear::new(store, &format!("{name}.w_real"), input, output, false)?,
            imag: Linear::new(store, &format!("{name}.w_imag"), input, output, false)?,
            b_real: store.param(&format!("{name}.b_real"), &[output], Init::Zeros)?,
            b_imag: store.param(&format!("{name}.b_imag"), &[output], Init::Zeros)?,
        })
    }

    pub fn forward(&self, xr: &Tensor, xi: &Tensor) -> Result<(Tensor, Tensor)> {
        let yr = (self.real.forward(xr)? - self.imag.forward(xi)?)?.broadcast_add(&self.b_real)?;
        let yi = (self.real.forward(xi)? + self.imag.forward(xr)?)?.broadcast_add(&self.b_imag)?;
        Ok((yr, yi))
    }
}

/// State of one complex LSTM layer: both real LSTMs run on a doubled batch
/// (`[x_r; x_i]` for the real-part LSTM, `[x_i; x_r]` for the imaginary).
#[derive(Debug, Clone)]
pub struct ComplexLstmLayerState {
    pub real: LstmState,
    pub imag: LstmState,
}

/// Carried state of the whole complex LSTM stack.
#[derive(Debug, Clone)]
pub struct ComplexLstmState {
    pub layers: Vec<ComplexLstmLayerState>,
}

#[derive(Debug, Clone)]
struct ComplexLstmLayer {
    real: Lstm,
    imag: Lstm,
}

/// Stacked complex LSTM followed by a complex projection.
///
/// Per layer, `out_r = L_r(x_r) - L_i(x_i)` and
/// `out_i = L_r(x_i) + L_i(x_r)` where `L_r`, `L_i` are real LSTMs.
#[derive(Debug, Clone)]
pub struct ComplexLstm {
    layers: Vec<ComplexLstmLayer>,
    projection: ComplexLinear,
    input: usize,
    hidden: usize,
    proj: usize,
}

impl ComplexLstm {
    /// `input`, `hidden` and `proj` are per-part sizes.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        proj: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return invalid("complex lstm needs at least one layer");
        }
        let mut ls = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = if l == 0 { input } else { hidden };
            ls.push(ComplexLstmLayer {
                real: Lstm::new(store, &format!("{name}.{l}.real"), in_dim, hidden)?,
                imag: Lstm::new(store, &format!("{name}.{l}.imag"), in_dim, hidden)?,
            });
        }
        Ok(Self {
            layers: ls,
            projection: ComplexLinear::new(store, &format!("{name}.proj"), hidden, proj)?,
            input,
            hidden,
            proj,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.proj
    }

    /// `xr`, `xi`: `[B, T, input]`. Returns projected `(y_r, y_i)` of
    /// `[B, T, proj]` and the carried state.
    pub fn forward(
        &self,
        xr: &Tensor,
        xi: &Tensor,
        state: Option<ComplexLstmState>,
    ) -> Result<(Tensor, Tensor, ComplexLstmState)> {
        if xr.dims() != xi.dims() {
            return shape_err("complex lstm parts", xr.dims(), xi.dims());
        }
        let b = xr.dims3()?.0;
        let mut states: Vec<Option<ComplexLstmLayerState>> = match state {
            Some(s) => {
                if s.layers.len() != self.layers.len() {
                    return invalid(format!(
                        "stale complex lstm state with {} layers, model has {}",
                        s.layers.len(),
                        self.layers.len()
                    ));
                }
                s.layers.into_iter().map(Some).collect()
            }
            None => vec![None; self.layers.len()],
        };
        let (mut r, mut i) = (xr.clone(), xi.clone());
        let mut new_states = Vec::with_capacity(self.layers.len());
        for (layer, st) in self.layers.iter().zip(states.iter_mut()) {
            let (sr, si) = match st.take() {
                Some(s) => (Some(s.real), Some(s.imag)),
                None => (None, None),
            };
            let (yr, sr) = layer.real.forward(&Tensor::cat(&[&r, &i], 0)?, sr)?;
            let (yi, si) = layer.imag.forward(&Tensor::cat(&[&i, &r], 0)?, si)?;
            // yr = [L_r(x_r); L_r(x_i)], yi = [L_i(x_i); L_i(x_r)]
            let out_r = (yr.narrow(0, 0, b)? - yi.narrow(0, 0, b)?)?;
            let out_i = (yr.narrow(0, b, b)? + yi.narrow(0, b, b)?)?;
            r = out_r;
            i = out_i;
            new_states.push(ComplexLstmLayerState { real: sr, imag: si });
        }
        let (pr, pi) = self.projection.forward(&r, &i)?;
        debug_assert_eq!(pr.dims()[2], self.proj);
        Ok((pr, pi, ComplexLstmState { layers: new_states }))
    }
}
