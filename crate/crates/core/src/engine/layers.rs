//! Single-sample forward and backward passes for every layer kind.
//!
//! Parameters arrive as effective (masked) value slices in the layout produced
//! by [`init_layer`]:
//!
//! * FC: `[W (O×I), b (O)]`
//! * factorized FC: `[A (R×I), a (R), B (O×R), b (O)]`
//! * Conv: `[K (O×I×f×g), b (O)]`
//! * factorized Conv: `[K (R×I×f×g), k (R), P (O×R), b (O)]`
//! * recurrent: `[W_q (O×(O+I)), b_q (O)]` per gate, gates ordered
//!   LSTM `i,f,o,g`; coupled LSTM `f,o,g`; GRU `z,r,n`; MGU `f,n`.
//!
//! Recurrent gate inputs are the concatenation `[h, x_t]`.

use rand::Rng;

use super::tensor::Param;
use crate::arch::{LayerKind, LayerSpec};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[r] = b[r] + Σ_c w[r,c]·x[c]`
fn affine(w: &[f64], b: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn affine_back(
    w: &[f64],
    cols: usize,
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for (r, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[r] += g;
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += g * row[c];
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    fh: usize,
    fw: usize,
    h: usize,
    w: usize,
}

impl ConvGeom {
    fn offsets(&self) -> (isize, isize) {
        (((self.fh - 1) / 2) as isize, ((self.fw - 1) / 2) as isize)
    }
}

/// Stride-1 convolution with zero "same" padding.
fn conv_same(g: ConvGeom, k: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (pt, pl) = g.offsets();
    let plane = g.h * g.w;
    let mut out = vec![0.0; g.cout * plane];
    for o in 0..g.cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.cin {
            let src = &x[c * plane..(c + 1) * plane];
            for a in 0..g.fh {
                for bb in 0..g.fw {
                    let kv = k[((o * g.cin + c) * g.fh + a) * g.fw + bb];
                    if kv == 0.0 {
                        continue;
                    }
                    for y in 0..g.h {
                        let sy = y as isize + a as isize - pt;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for xx in 0..g.w {
                            let sx = xx as isize + bb as isize - pl;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            dst[y * g.w + xx] += kv * src[sy as usize * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_same_back(
    g: ConvGeom,
    k: &[f64],
    x: &[f64],
    dy: &[f64],
    dk: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let (pt, pl) = g.offsets();
    let plane = g.h * g.w;
    for o in 0..g.cout {
        let dout = &dy[o * plane..(o + 1) * plane];
        db[o] += dout.iter().sum::<f64>();
        for c in 0..g.cin {
            let src = &x[c * plane..(c + 1) * plane];
            for a in 0..g.fh {
                for bb in 0..g.fw {
                    let ki = ((o * g.cin + c) * g.fh + a) * g.fw + bb;
                    let kv = k[ki];
                    let mut acc = 0.0;
                    for y in 0..g.h {
                        let sy = y as isize + a as isize - pt;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for xx in 0..g.w {
                            let sx = xx as isize + bb as isize - pl;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            let si = c * plane + sy as usize * g.w + sx as usize;
                            let d = dout[y * g.w + xx];
                            acc += d * src[si - c * plane];
                            dx[si] += d * kv;
                        }
                    }
                    dk[ki] += acc;
                }
            }
        }
    }
}

/// Cached intermediates of one recurrent step.
#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    /// `[h_{t-1}, x_t]`.
    z: Vec<f64>,
    /// Candidate input `[r⊙h, x_t]` (GRU) or `[f⊙h, x_t]` (MGU).
    q: Vec<f64>,
    /// Activated gate values in parameter order.
    gates: Vec<Vec<f64>>,
    c_prev: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Dense { x: Vec<f64>, pre: Vec<f64> },
    FactDense { x: Vec<f64>, u: Vec<f64>, pre: Vec<f64> },
    Conv { x: Vec<f64>, pre: Vec<f64> },
    FactConv { x: Vec<f64>, u: Vec<f64>, pre: Vec<f64> },
    Recurrent { steps: Vec<StepCache> },
}

impl Cache {
    /// Smallest |pre-activation| feeding a ReLU, or infinity for recurrent caches.
    pub(crate) fn relu_margin(&self) -> f64 {
        match self {
            Cache::Dense { pre, .. }
            | Cache::FactDense { pre, .. }
            | Cache::Conv { pre, .. }
            | Cache::FactConv { pre, .. } => pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
            Cache::Recurrent { .. } => f64::INFINITY,
        }
    }

    #[cfg(test)]
    pub(crate) fn gates(&self) -> Vec<Vec<Vec<f64>>> {
        match self {
            Cache::Recurrent { steps } => steps.iter().map(|s| s.gates.clone()).collect(),
            _ => Vec::new(),
        }
    }
}

fn geom(spec: &LayerSpec, cout: usize) -> ConvGeom {
    ConvGeom {
        cin: spec.input_dim,
        cout,
        fh: spec.filter_h.unwrap_or(1),
        fw: spec.filter_w.unwrap_or(1),
        h: spec.feature_h.unwrap_or(1),
        w: spec.feature_w.unwrap_or(1),
    }
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Forward pass of one layer on one sample. `relu` applies to Conv/FC kinds
/// only; recurrent layers emit their final hidden state unchanged.
pub(crate) fn forward(spec: &LayerSpec, p: &[Vec<f64>], x: &[f64], relu: bool) -> (Vec<f64>, Cache) {
    let with_act = |pre: &Vec<f64>| {
        let mut out = pre.clone();
        if relu {
            relu_in_place(&mut out);
        }
        out
    };
    match spec.kind {
        LayerKind::Fc => {
            let pre = affine(&p[0], &p[1], spec.input_dim, x);
            (with_act(&pre), Cache::Dense { x: x.to_vec(), pre })
        }
        LayerKind::FactorizedFc => {
            let u = affine(&p[0], &p[1], spec.input_dim, x);
            let pre = affine(&p[2], &p[3], u.len(), &u);
            (with_act(&pre), Cache::FactDense { x: x.to_vec(), u, pre })
        }
        LayerKind::Conv => {
            let pre = conv_same(geom(spec, spec.output_dim), &p[0], &p[1], x);
            (with_act(&pre), Cache::Conv { x: x.to_vec(), pre })
        }
        LayerKind::FactorizedConv => {
            let r = spec.rank.unwrap_or(1);
            let g = geom(spec, r);
            let u = conv_same(g, &p[0], &p[1], x);
            let plane = g.h * g.w;
            let mut pre = vec![0.0; spec.output_dim * plane];
            for o in 0..spec.output_dim {
                for pos in 0..plane {
                    let mut acc = p[3][o];
                    for j in 0..r {
                        acc += p[2][o * r + j] * u[j * plane + pos];
                    }
                    pre[o * plane + pos] = acc;
                }
            }
            (with_act(&pre), Cache::FactConv { x: x.to_vec(), u, pre })
        }
        LayerKind::Lstm | LayerKind::CoupledLstm | LayerKind::Gru | LayerKind::Mgu => {
            let (h, steps) = recurrent_forward(spec, p, x);
            (h, Cache::Recurrent { steps })
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn recurrent_forward(spec: &LayerSpec, p: &[Vec<f64>], x: &[f64]) -> (Vec<f64>, Vec<StepCache>) {
    let (o, i, s) = (spec.output_dim, spec.input_dim, spec.steps.unwrap_or(1));
    let cols = o + i;
    let mut h = vec![0.0; o];
    let mut c = vec![0.0; o];
    let mut steps = Vec::with_capacity(s);
    for t in 0..s {
        let xt = &x[t * i..(t + 1) * i];
        let z = concat(&h, xt);
        let gate = |q: usize, input: &[f64]| affine(&p[2 * q], &p[2 * q + 1], cols, input);
        match spec.kind {
            LayerKind::Lstm | LayerKind::CoupledLstm => {
                let (ig, fg, og, gg) = if spec.kind == LayerKind::Lstm {
                    let ig: Vec<f64> = gate(0, &z).into_iter().map(sigmoid).collect();
                    let fg: Vec<f64> = gate(1, &z).into_iter().map(sigmoid).collect();
                    let og: Vec<f64> = gate(2, &z).into_iter().map(sigmoid).collect();
                    let gg: Vec<f64> = gate(3, &z).into_iter().map(f64::tanh).collect();
                    (ig, fg, og, gg)
                } else {
                    let fg: Vec<f64> = gate(0, &z).into_iter().map(sigmoid).collect();
                    let og: Vec<f64> = gate(1, &z).into_iter().map(sigmoid).collect();
                    let gg: Vec<f64> = gate(2, &z).into_iter().map(f64::tanh).collect();
                    let ig: Vec<f64> = fg.iter().map(|f| 1.0 - f).collect();
                    (ig, fg, og, gg)
                };
                let c_new: Vec<f64> = (0..o).map(|k| fg[k] * c[k] + ig[k] * gg[k]).collect();
                let h_new: Vec<f64> = (0..o).map(|k| og[k] * c_new[k].tanh()).collect();
                let gates = if spec.kind == LayerKind::Lstm {
                    vec![ig, fg, og, gg]
                } else {
                    vec![fg, og, gg]
                };
                steps.push(StepCache {
                    z,
                    q: Vec::new(),
                    gates,
                    c_prev: std::mem::replace(&mut c, c_new.clone()),
                    c: c_new,
                });
                h = h_new;
            }
            LayerKind::Gru => {
                let zg: Vec<f64> = gate(0, &z).into_iter().map(sigmoid).collect();
                let rg: Vec<f64> = gate(1, &z).into_iter().map(sigmoid).collect();
                let rh: Vec<f64> = rg.iter().zip(&h).map(|(r, h)| r * h).collect();
                let q = concat(&rh, xt);
                let ng: Vec<f64> = gate(2, &q).into_iter().map(f64::tanh).collect();
                let h_new: Vec<f64> = (0..o).map(|k| (1.0 - zg[k]) * h[k] + zg[k] * ng[k]).collect();
                steps.push(StepCache {
                    z,
                    q,
                    gates: vec![zg, rg, ng],
                    c_prev: Vec::new(),
                    c: Vec::new(),
                });
                h = h_new;
            }
            LayerKind::Mgu => {
                let fg: Vec<f64> = gate(0, &z).into_iter().map(sigmoid).collect();
                let fh: Vec<f64> = fg.iter().zip(&h).map(|(f, h)| f * h).collect();
                let q = concat(&fh, xt);
                let ng: Vec<f64> = gate(1, &q).into_iter().map(f64::tanh).collect();
                let h_new: Vec<f64> = (0..o).map(|k| (1.0 - fg[k]) * h[k] + fg[k] * ng[k]).collect();
                steps.push(StepCache {
                    z,
                    q,
                    gates: vec![fg, ng],
                    c_prev: Vec::new(),
                    c: Vec::new(),
                });
                h = h_new;
            }
            _ => unreachable!("non-recurrent kind"),
        }
    }
    (h, steps)
}

/// Backward pass of one layer on one sample. `d_out` is the gradient with
/// respect to the layer's (post-activation) output. Parameter gradients are
/// accumulated into `grads`; the input gradient is returned.
pub(crate) fn backward(
    spec: &LayerSpec,
    p: &[Vec<f64>],
    cache: &Cache,
    d_out: &[f64],
    relu: bool,
    grads: &mut [Vec<f64>],
) -> Vec<f64> {
    let gate_relu = |pre: &[f64]| -> Vec<f64> {
        if relu {
            d_out
                .iter()
                .zip(pre)
                .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
                .collect()
        } else {
            d_out.to_vec()
        }
    };
    match cache {
        Cache::Dense { x, pre } => {
            let dy = gate_relu(pre);
            let mut dx = vec![0.0; x.len()];
            let (dw, rest) = grads.split_at_mut(1);
            affine_back(&p[0], x.len(), x, &dy, &mut dw[0], &mut rest[0], &mut dx);
            dx
        }
        Cache::FactDense { x, u, pre } => {
            let dy = gate_relu(pre);
            let mut du = vec![0.0; u.len()];
            {
                let (_, tail) = grads.split_at_mut(2);
                let (db_w, db_b) = tail.split_at_mut(1);
                affine_back(&p[2], u.len(), u, &dy, &mut db_w[0], &mut db_b[0], &mut du);
            }
            let mut dx = vec![0.0; x.len()];
            let (da, rest) = grads.split_at_mut(1);
            affine_back(&p[0], x.len(), x, &du, &mut da[0], &mut rest[0], &mut dx);
            dx
        }
        Cache::Conv { x, pre } => {
            let dy = gate_relu(pre);
            let mut dx = vec![0.0; x.len()];
            let (dk, rest) = grads.split_at_mut(1);
            conv_same_back(geom(spec, spec.output_dim), &p[0], x, &dy, &mut dk[0], &mut rest[0], &mut dx);
            dx
        }
        Cache::FactConv { x, u, pre } => {
            let dy = gate_relu(pre);
            let r = spec.rank.unwrap_or(1);
            let g = geom(spec, r);
            let plane = g.h * g.w;
            let mut du = vec![0.0; u.len()];
            for o in 0..spec.output_dim {
                for pos in 0..plane {
                    let d = dy[o * plane + pos];
                    if d == 0.0 {
                        continue;
                    }
                    grads[3][o] += d;
                    for j in 0..r {
                        grads[2][o * r + j] += d * u[j * plane + pos];
                        du[j * plane + pos] += d * p[2][o * r + j];
                    }
                }
            }
            let mut dx = vec![0.0; x.len()];
            let (dk, rest) = grads.split_at_mut(1);
            conv_same_back(g, &p[0], x, &du, &mut dk[0], &mut rest[0], &mut dx);
            dx
        }
        Cache::Recurrent { steps } => recurrent_backward(spec, p, steps, d_out, grads),
    }
}

fn gate_back(p: &[Vec<f64>], q: usize, cols: usize, input: &[f64], da: &[f64], grads: &mut [Vec<f64>], d_input: &mut [f64]) {
    let (left, right) = grads.split_at_mut(2 * q + 1);
    affine_back(&p[2 * q], cols, input, da, &mut left[2 * q], &mut right[0], d_input);
}

fn recurrent_backward(
    spec: &LayerSpec,
    p: &[Vec<f64>],
    steps: &[StepCache],
    d_out: &[f64],
    grads: &mut [Vec<f64>],
) -> Vec<f64> {
    let (o, i) = (spec.output_dim, spec.input_dim);
    let cols = o + i;
    let mut dx = vec![0.0; i * steps.len()];
    let mut dh = d_out.to_vec();
    let mut dc = vec![0.0; o];
    for (t, st) in steps.iter().enumerate().rev() {
        let mut dz = vec![0.0; cols];
        match spec.kind {
            LayerKind::Lstm | LayerKind::CoupledLstm => {
                let coupled = spec.kind == LayerKind::CoupledLstm;
                let (fg, og, gg) = if coupled {
                    (&st.gates[0], &st.gates[1], &st.gates[2])
                } else {
                    (&st.gates[1], &st.gates[2], &st.gates[3])
                };
                let ig: Vec<f64> = if coupled {
                    fg.iter().map(|f| 1.0 - f).collect()
                } else {
                    st.gates[0].clone()
                };
                let mut da_i = vec![0.0; o];
                let mut da_f = vec![0.0; o];
                let mut da_o = vec![0.0; o];
                let mut da_g = vec![0.0; o];
                let mut dc_prev = vec![0.0; o];
                for k in 0..o {
                    let tc = st.c[k].tanh();
                    let d_o = dh[k] * tc;
                    let dck = dc[k] + dh[k] * og[k] * (1.0 - tc * tc);
                    let d_f = dck * st.c_prev[k];
                    let d_i = dck * gg[k];
                    let d_g = dck * ig[k];
                    dc_prev[k] = dck * fg[k];
                    let f = fg[k];
                    da_f[k] = if coupled { (d_f - d_i) * f * (1.0 - f) } else { d_f * f * (1.0 - f) };
                    da_i[k] = d_i * ig[k] * (1.0 - ig[k]);
                    da_o[k] = d_o * og[k] * (1.0 - og[k]);
                    da_g[k] = d_g * (1.0 - gg[k] * gg[k]);
                }
                if coupled {
                    gate_back(p, 0, cols, &st.z, &da_f, grads, &mut dz);
                    gate_back(p, 1, cols, &st.z, &da_o, grads, &mut dz);
                    gate_back(p, 2, cols, &st.z, &da_g, grads, &mut dz);
                } else {
                    gate_back(p, 0, cols, &st.z, &da_i, grads, &mut dz);
                    gate_back(p, 1, cols, &st.z, &da_f, grads, &mut dz);
                    gate_back(p, 2, cols, &st.z, &da_o, grads, &mut dz);
                    gate_back(p, 3, cols, &st.z, &da_g, grads, &mut dz);
                }
                dc = dc_prev;
                dh = dz[..o].to_vec();
            }
            LayerKind::Gru => {
                let (zg, rg, ng) = (&st.gates[0], &st.gates[1], &st.gates[2]);
                let h_prev = &st.z[..o];
                let mut dh_prev: Vec<f64> = (0..o).map(|k| dh[k] * (1.0 - zg[k])).collect();
                let da_n: Vec<f64> = (0..o).map(|k| dh[k] * zg[k] * (1.0 - ng[k] * ng[k])).collect();
                let mut dq = vec![0.0; cols];
                gate_back(p, 2, cols, &st.q, &da_n, grads, &mut dq);
                let mut da_z = vec![0.0; o];
                let mut da_r = vec![0.0; o];
                for k in 0..o {
                    let dzk = dh[k] * (ng[k] - h_prev[k]);
                    da_z[k] = dzk * zg[k] * (1.0 - zg[k]);
                    let drk = dq[k] * h_prev[k];
                    da_r[k] = drk * rg[k] * (1.0 - rg[k]);
                    dh_prev[k] += dq[k] * rg[k];
                }
                for (d, s) in dx[t * i..(t + 1) * i].iter_mut().zip(&dq[o..]) {
                    *d += s;
                }
                gate_back(p, 0, cols, &st.z, &da_z, grads, &mut dz);
                gate_back(p, 1, cols, &st.z, &da_r, grads, &mut dz);
                for k in 0..o {
                    dh_prev[k] += dz[k];
                }
                dh = dh_prev;
            }
            LayerKind::Mgu => {
                let (fg, ng) = (&st.gates[0], &st.gates[1]);
                let h_prev = &st.z[..o];
                let mut dh_prev: Vec<f64> = (0..o).map(|k| dh[k] * (1.0 - fg[k])).collect();
                let da_n: Vec<f64> = (0..o).map(|k| dh[k] * fg[k] * (1.0 - ng[k] * ng[k])).collect();
                let mut dq = vec![0.0; cols];
                gate_back(p, 1, cols, &st.q, &da_n, grads, &mut dq);
                let mut da_f = vec![0.0; o];
                for k in 0..o {
                    let dfk = dh[k] * (ng[k] - h_prev[k]) + dq[k] * h_prev[k];
                    da_f[k] = dfk * fg[k] * (1.0 - fg[k]);
                    dh_prev[k] += dq[k] * fg[k];
                }
                for (d, s) in dx[t * i..(t + 1) * i].iter_mut().zip(&dq[o..]) {
                    *d += s;
                }
                gate_back(p, 0, cols, &st.z, &da_f, grads, &mut dz);
                for k in 0..o {
                    dh_prev[k] += dz[k];
                }
                dh = dh_prev;
            }
            _ => unreachable!("non-recurrent kind"),
        }
        for (d, s) in dx[t * i..(t + 1) * i].iter_mut().zip(&dz[o..]) {
            *d += s;
        }
    }
    dx
}

fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

pub(crate) fn gate_names(kind: LayerKind) -> &'static [&'static str] {
    match kind {
        LayerKind::Lstm => &["i", "f", "o", "g"],
        LayerKind::CoupledLstm => &["f", "o", "g"],
        LayerKind::Gru => &["z", "r", "n"],
        LayerKind::Mgu => &["f", "n"],
        _ => &[],
    }
}

/// Freshly initialized parameters: weights uniform in `±sqrt(6/(fan_in+fan_out))`,
/// biases zero, masks all ones.
pub fn init_layer(spec: &LayerSpec, rng: &mut impl Rng) -> Vec<Param> {
    let (i, o) = (spec.input_dim, spec.output_dim);
    let (fh, fw) = (spec.filter_h.unwrap_or(1), spec.filter_w.unwrap_or(1));
    let r = spec.rank.unwrap_or(1);
    match spec.kind {
        LayerKind::Fc => vec![
            Param::weight("W", vec![o, i], uniform(rng, o * i, i, o)),
            Param::bias("b", vec![0.0; o]),
        ],
        LayerKind::FactorizedFc => vec![
            Param::weight("A", vec![r, i], uniform(rng, r * i, i, r)),
            Param::bias("a", vec![0.0; r]),
            Param::weight("B", vec![o, r], uniform(rng, o * r, r, o)),
            Param::bias("b", vec![0.0; o]),
        ],
        LayerKind::Conv => {
            let k = fh * fw;
            vec![
                Param::weight("K", vec![o, i, fh, fw], uniform(rng, o * i * k, i * k, o * k)),
                Param::bias("b", vec![0.0; o]),
            ]
        }
        LayerKind::FactorizedConv => {
            let k = fh * fw;
            vec![
                Param::weight("K", vec![r, i, fh, fw], uniform(rng, r * i * k, i * k, r * k)),
                Param::bias("k", vec![0.0; r]),
                Param::weight("P", vec![o, r], uniform(rng, o * r, r, o)),
                Param::bias("b", vec![0.0; o]),
            ]
        }
        kind => gate_names(kind)
            .iter()
            .flat_map(|g| {
                [
                    Param::weight(format!("W_{g}"), vec![o, o + i], uniform(rng, o * (o + i), o + i, o)),
                    Param::bias(format!("b_{g}"), vec![0.0; o]),
                ]
            })
            .collect(),
    }
}
