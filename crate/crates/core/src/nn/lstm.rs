use ndarray::linalg::general_mat_vec_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::activation::sigmoid_scalar;
use super::{push_prefixed, shape_err, uniform, view_d, view_mut_d, NnError, Parameterized};
use crate::Scalar;

/// Single-direction LSTM with gate blocks ordered input, forget, cell,
/// output in the `4H` dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    /// `4H x input`
    pub w_ih: Array2<T>,
    /// `4H x H`
    pub w_hh: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    input: Array2<T>,
    /// activated gates per step, `T x 4H`
    gates: Array2<T>,
    cells: Array2<T>,
    tanh_cells: Array2<T>,
    hidden: Array2<T>,
    reverse: bool,
}

impl<T: Scalar> Lstm<T> {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((4 * hidden, inputs)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, forget-gate bias 1, other
    /// biases 0.
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = uniform(rng, &[4 * hidden, inputs], 1.0 / (inputs.max(1) as f64).sqrt());
        let w_hh = uniform(rng, &[4 * hidden, hidden], 1.0 / (hidden.max(1) as f64).sqrt());
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        Self {
            w_ih: w_ih.into_dimensionality().expect("2-d"),
            w_hh: w_hh.into_dimensionality().expect("2-d"),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.w_ih.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.hidden())
    }

    /// Runs over the `T x input` sequence, right to left when `reverse`.
    /// Returns the `T x H` hidden states in the input's time order.
    pub fn forward(&self, x: &Array2<T>, reverse: bool) -> Result<(Array2<T>, LstmCache<T>), NnError> {
        if x.ncols() != self.inputs() {
            return Err(shape_err("lstm", &[x.nrows(), self.inputs()], x.shape()));
        }
        let steps = x.nrows();
        let h = self.hidden();
        let pre = project(x, &self.w_ih, &self.bias);
        let mut gates = Array2::zeros((steps, 4 * h));
        let mut cells = Array2::zeros((steps, h));
        let mut tanh_cells = Array2::zeros((steps, h));
        let mut hidden = Array2::zeros((steps, h));
        let mut h_prev = Array1::<T>::zeros(h);
        let mut c_prev = Array1::<T>::zeros(h);
        let mut z = Array1::<T>::zeros(4 * h);
        for t in order(steps, reverse) {
            z.assign(&pre.row(t));
            general_mat_vec_mul(T::one(), &self.w_hh, &h_prev, T::one(), &mut z);
            let zs = z.as_slice().expect("contiguous");
            let g_row = gates.row_mut(t).into_slice().expect("contiguous");
            let (gi, rest) = g_row.split_at_mut(h);
            let (gf, rest) = rest.split_at_mut(h);
            let (gg, go) = rest.split_at_mut(h);
            let cs = c_prev.as_slice_mut().expect("contiguous");
            let hs = h_prev.as_slice_mut().expect("contiguous");
            let mut tc_row = tanh_cells.row_mut(t);
            let tcs = tc_row.as_slice_mut().expect("contiguous");
            for k in 0..h {
                let i = sigmoid_scalar(zs[k]);
                let f = sigmoid_scalar(zs[h + k]);
                let g = zs[2 * h + k].tanh();
                let o = sigmoid_scalar(zs[3 * h + k]);
                gi[k] = i;
                gf[k] = f;
                gg[k] = g;
                go[k] = o;
                let c = f * cs[k] + i * g;
                let tc = c.tanh();
                cs[k] = c;
                tcs[k] = tc;
                hs[k] = o * tc;
            }
            cells.row_mut(t).assign(&c_prev);
            hidden.row_mut(t).assign(&h_prev);
        }
        let out = hidden.clone();
        Ok((
            out,
            LstmCache {
                input: x.clone(),
                gates,
                cells,
                tanh_cells,
                hidden,
                reverse,
            },
        ))
    }

    pub fn backward(&self, cache: &LstmCache<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, Self), NnError> {
        let (dx, grads) = self.backward_impl(cache, grad_out, true)?;
        Ok((dx.expect("input gradient requested"), grads))
    }

    /// Parameter gradients only; for a first layer whose input needs no
    /// gradient.
    pub fn backward_params(&self, cache: &LstmCache<T>, grad_out: &Array2<T>) -> Result<Self, NnError> {
        Ok(self.backward_impl(cache, grad_out, false)?.1)
    }

    fn backward_impl(
        &self,
        cache: &LstmCache<T>,
        grad_out: &Array2<T>,
        input_grad: bool,
    ) -> Result<(Option<Array2<T>>, Self), NnError> {
        let h = self.hidden();
        let steps = cache.input.nrows();
        if cache.input.ncols() != self.inputs() || cache.gates.ncols() != 4 * h {
            return Err(NnError::Cache {
                layer: "lstm".into(),
                reason: "cache was produced by a layer of a different shape".into(),
            });
        }
        if grad_out.shape() != [steps, h] {
            return Err(shape_err("lstm", &[steps, h], grad_out.shape()));
        }
        let w_hh_t = self.w_hh.t().as_standard_layout().into_owned();
        let mut dz = Array2::<T>::zeros((steps, 4 * h));
        let mut h_prev_rows = Array2::<T>::zeros((steps, h));
        let mut dh_next = Array1::<T>::zeros(h);
        let mut dc_next = Array1::<T>::zeros(h);
        let one = T::one();
        let fwd: Vec<usize> = order(steps, cache.reverse).collect();
        for (pos, &t) in fwd.iter().enumerate().rev() {
            let prev = (pos > 0).then(|| fwd[pos - 1]);
            if let Some(p) = prev {
                h_prev_rows.row_mut(t).assign(&cache.hidden.row(p));
            }
            let gates = cache.gates.row(t);
            let gs = gates.as_slice().expect("contiguous");
            let tc_row = cache.tanh_cells.row(t);
            let tc = tc_row.as_slice().expect("contiguous");
            let go_row = grad_out.row(t);
            let zero_state = vec![T::zero(); if prev.is_some() { 0 } else { h }];
            let c_prev_row = prev.map(|p| cache.cells.row(p));
            let c_prev = c_prev_row.as_ref().map_or(&zero_state[..], |r| r.as_slice().expect("contiguous"));
            let dhn = dh_next.as_slice().expect("contiguous");
            let dcn = dc_next.as_slice_mut().expect("contiguous");
            let mut dz_row = dz.row_mut(t);
            let dzs = dz_row.as_slice_mut().expect("contiguous");
            for k in 0..h {
                let (i, f, g, o) = (gs[k], gs[h + k], gs[2 * h + k], gs[3 * h + k]);
                let dh = go_row[k] + dhn[k];
                let d_o = dh * tc[k];
                let dc = dcn[k] + dh * o * (one - tc[k] * tc[k]);
                dcn[k] = dc * f;
                dzs[k] = dc * g * i * (one - i);
                dzs[h + k] = dc * c_prev[k] * f * (one - f);
                dzs[2 * h + k] = dc * i * (one - g * g);
                dzs[3 * h + k] = d_o * o * (one - o);
            }
            general_mat_vec_mul(T::one(), &w_hh_t, &dz.row(t), T::zero(), &mut dh_next);
        }
        let grads = Self {
            w_ih: input_weight_grad(&dz, &cache.input),
            w_hh: dz.t().dot(&h_prev_rows),
            bias: dz.sum_axis(Axis(0)),
        };
        Ok((input_grad.then(|| dz.dot(&self.w_ih)), grads))
    }
}

/// Inputs with at most this fraction of nonzeros take the sparse path.
const SPARSE_DENSITY: f64 = 0.2;

fn nonzeros<T: Scalar>(x: &Array2<T>) -> Option<Vec<Vec<(usize, T)>>> {
    let limit = (x.len() as f64 * SPARSE_DENSITY) as usize;
    let mut count = 0;
    let mut rows = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let nz: Vec<(usize, T)> = row
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_zero())
            .map(|(k, &v)| (k, v))
            .collect();
        count += nz.len();
        if count > limit {
            return None;
        }
        rows.push(nz);
    }
    Some(rows)
}

/// `x W^T + b`, skipping zero inputs when `x` is sparse (piano-roll
/// features usually are).
fn project<T: Scalar>(x: &Array2<T>, w: &Array2<T>, bias: &Array1<T>) -> Array2<T> {
    let Some(rows) = nonzeros(x) else {
        return x.dot(&w.t()) + bias;
    };
    let wt: Array2<T> = w.t().as_standard_layout().into_owned();
    let mut out = Array2::zeros((x.nrows(), w.nrows()));
    for (mut o, nz) in out.rows_mut().into_iter().zip(&rows) {
        o.assign(bias);
        for &(k, v) in nz {
            o.scaled_add(v, &wt.row(k));
        }
    }
    out
}

/// `dz^T x`, the input-weight gradient, with the same sparse shortcut.
fn input_weight_grad<T: Scalar>(dz: &Array2<T>, x: &Array2<T>) -> Array2<T> {
    let Some(rows) = nonzeros(x) else {
        return dz.t().dot(x);
    };
    let mut gt = Array2::<T>::zeros((x.ncols(), dz.ncols()));
    for (t, nz) in rows.iter().enumerate() {
        let d: ArrayView2<'_, T> = dz.slice(s![t..t + 1, ..]);
        for &(k, v) in nz {
            gt.row_mut(k).scaled_add(v, &d.row(0));
        }
    }
    gt.reversed_axes().as_standard_layout().into_owned()
}

fn order(steps: usize, reverse: bool) -> Box<dyn DoubleEndedIterator<Item = usize>> {
    if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    }
}

impl<T: Scalar> Parameterized<T> for Lstm<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![
            ("w_ih".into(), view_d(&self.w_ih)),
            ("w_hh".into(), view_d(&self.w_hh)),
            ("bias".into(), view_d(&self.bias)),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![
            ("w_ih".into(), view_mut_d(&mut self.w_ih)),
            ("w_hh".into(), view_mut_d(&mut self.w_hh)),
            ("bias".into(), view_mut_d(&mut self.bias)),
        ]
    }
}

/// Bidirectional LSTM: per frame, forward states followed by backward
/// states, `T x 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T> {
    pub forward: Lstm<T>,
    pub backward: Lstm<T>,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl<T: Scalar> BiLstm<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward: Lstm::init(inputs, hidden, rng),
            backward: Lstm::init(inputs, hidden, rng),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            forward: Lstm::zeros(inputs, hidden),
            backward: Lstm::zeros(inputs, hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.hidden())
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn inputs(&self) -> usize {
        self.forward.inputs()
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden()
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<(Array2<T>, BiLstmCache<T>), NnError> {
        if x.ncols() != self.inputs() {
            return Err(shape_err("bilstm", &[x.nrows(), self.inputs()], x.shape()));
        }
        let (hf, fwd) = self.forward.forward(x, false)?;
        let (hb, bwd) = self.backward.forward(x, true)?;
        let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("equal rows");
        Ok((out, BiLstmCache { fwd, bwd }))
    }

    pub fn backward(&self, cache: &BiLstmCache<T>, grad_out: &Array2<T>) -> Result<(Array2<T>, Self), NnError> {
        let h = self.hidden();
        let steps = cache.fwd.input.nrows();
        if grad_out.shape() != [steps, 2 * h] {
            return Err(shape_err("bilstm", &[steps, 2 * h], grad_out.shape()));
        }
        let gf = grad_out.slice(s![.., ..h]).to_owned();
        let gb = grad_out.slice(s![.., h..]).to_owned();
        let (dxf, f) = self.forward.backward(&cache.fwd, &gf)?;
        let (dxb, b) = self.backward.backward(&cache.bwd, &gb)?;
        Ok((
            dxf + dxb,
            Self {
                forward: f,
                backward: b,
            },
        ))
    }
}

impl<T: Scalar> BiLstm<T> {
    /// Parameter gradients only, skipping the input gradient.
    pub fn backward_params(&self, cache: &BiLstmCache<T>, grad_out: &Array2<T>) -> Result<Self, NnError> {
        let h = self.hidden();
        let steps = cache.fwd.input.nrows();
        if grad_out.shape() != [steps, 2 * h] {
            return Err(shape_err("bilstm", &[steps, 2 * h], grad_out.shape()));
        }
        let gf = grad_out.slice(s![.., ..h]).to_owned();
        let gb = grad_out.slice(s![.., h..]).to_owned();
        Ok(Self {
            forward: self.forward.backward_params(&cache.fwd, &gf)?,
            backward: self.backward.backward_params(&cache.bwd, &gb)?,
        })
    }
}

impl<T: Scalar> Parameterized<T> for BiLstm<T> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        push_prefixed(&mut out, "fwd", self.forward.params());
        push_prefixed(&mut out, "bwd", self.backward.params());
        out
    }

    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        push_prefixed(&mut out, "fwd", self.forward.params_mut());
        push_prefixed(&mut out, "bwd", self.backward.params_mut());
        out
    }
}
