//! The token generator: a token embedding, a stacked LSTM encoder, and
//! feed-forward policy and value heads, with hand-written backpropagation.
//!
//! All parameters live in one flat vector so the optimizer, gradient
//! accumulation and checkpoints treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub head_hidden: usize,
    /// Dropout between LSTM layers, active only while computing updates.
    pub dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 32,
            hidden: 128,
            layers: 2,
            head_hidden: 64,
            dropout: 0.1,
        }
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Dense {
    fn alloc(next: &mut usize, inp: usize, out: usize) -> Dense {
        let d = Dense {
            w: *next,
            b: *next + inp * out,
            inp,
            out,
        };
        *next += inp * out + out;
        d
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.inp * self.out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.out]
    }

    /// `out = W x + b`.
    fn forward(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        matvec(self.weights(p), self.inp, x, self.bias(p), out);
    }

    /// Accumulates parameter gradients and adds `W^T dy` into `dx`.
    fn backward(&self, p: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        outer_acc(
            &mut grad[self.w..self.w + self.inp * self.out],
            self.inp,
            dy,
            x,
        );
        for (g, d) in grad[self.b..self.b + self.out].iter_mut().zip(dy) {
            *g += d;
        }
        if let Some(dx) = dx {
            matvec_t_acc(self.weights(p), self.inp, dy, dx);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    embed: usize,
    n_inputs: usize,
    /// Per layer: gate weights over `[x; h]` producing i, f, g, o blocks.
    lstm: Vec<Dense>,
    pi: [Dense; 3],
    v: [Dense; 3],
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig, n_actions: usize) -> Layout {
        let n_inputs = n_actions + 1;
        let mut next = n_inputs * cfg.embed_dim;
        let mut lstm = Vec::new();
        for l in 0..cfg.layers {
            let inp = if l == 0 { cfg.embed_dim } else { cfg.hidden };
            lstm.push(Dense::alloc(&mut next, inp + cfg.hidden, 4 * cfg.hidden));
        }
        let top = if cfg.layers == 0 {
            cfg.embed_dim
        } else {
            cfg.hidden
        };
        let hh = cfg.head_hidden;
        let pi = [
            Dense::alloc(&mut next, top, hh),
            Dense::alloc(&mut next, hh, hh),
            Dense::alloc(&mut next, hh, n_actions),
        ];
        let v = [
            Dense::alloc(&mut next, top, hh),
            Dense::alloc(&mut next, hh, hh),
            Dense::alloc(&mut next, hh, 1),
        ];
        Layout {
            embed: 0,
            n_inputs,
            lstm,
            pi,
            v,
            total: next,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn matvec(w: &[f64], cols: usize, x: &[f64], b: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (r, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            for (x, wv) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *x += d * wv;
            }
        }
    }
}

fn outer_acc(g: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (r, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            for (gv, xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *gv += d * xv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-probabilities of a softmax restricted to legal actions; illegal
/// actions get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, PolicyError> {
    if logits.iter().zip(mask).any(|(l, &m)| m && !l.is_finite()) {
        return Err(PolicyError::NonFiniteOutput);
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::AllMasked);
    }
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

/// Masked probabilities; illegal actions are exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, PolicyError> {
    Ok(masked_log_softmax(logits, mask)?
        .into_iter()
        .map(|lp| {
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp()
            }
        })
        .collect())
}

/// Recurrent state between incremental steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

/// Intermediate values of one LSTM layer over an episode.
#[derive(Debug, Clone, Default)]
struct LayerCache {
    /// `[x_t; h_{t-1}]` per step.
    xh: Vec<Vec<f64>>,
    /// Gate activations i, f, g, o concatenated per step.
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
struct HeadCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
}

/// Forward pass of a whole episode, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    inputs: Vec<usize>,
    layers: Vec<LayerCache>,
    /// Dropout scale applied to each layer's output before the next layer.
    drop: Vec<Vec<Vec<f64>>>,
    pi: Vec<HeadCache>,
    v: Vec<HeadCache>,
    pub logits: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    cfg: PolicyConfig,
    n_actions: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

impl PolicyModel {
    /// Uniform initialization scaled by fan-in; the policy output layer starts
    /// small so the initial policy is close to uniform over legal actions.
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, n_actions: usize, rng: &mut R) -> PolicyModel {
        let layout = Layout::new(&cfg, n_actions);
        let mut params = vec![0.0; layout.total];
        for p in &mut params[..layout.n_inputs * cfg.embed_dim] {
            *p = rng.gen_range(-1.0..1.0);
        }
        let mut init = |d: &Dense, scale: f64| {
            let bound = scale / (d.inp as f64).sqrt();
            for p in &mut params[d.w..d.b + d.out] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        for d in &layout.lstm {
            init(d, 1.0);
        }
        for d in layout.pi[..2].iter().chain(&layout.v) {
            init(d, 1.0);
        }
        init(&layout.pi[2], 0.01);
        for d in &layout.lstm {
            let h = cfg.hidden;
            // forget-gate bias starts at 1
            for p in &mut params[d.b + h..d.b + 2 * h] {
                *p = 1.0;
            }
        }
        PolicyModel {
            cfg,
            n_actions,
            layout,
            params,
        }
    }

    /// Wraps an existing parameter vector.
    pub fn from_params(
        cfg: PolicyConfig,
        n_actions: usize,
        params: Vec<f64>,
    ) -> Result<PolicyModel, PolicyError> {
        let layout = Layout::new(&cfg, n_actions);
        if params.len() != layout.total {
            return Err(PolicyError::ParameterCount {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(PolicyModel {
            cfg,
            n_actions,
            layout,
            params,
        })
    }

    pub fn n_params_for(cfg: &PolicyConfig, n_actions: usize) -> usize {
        Layout::new(cfg, n_actions).total
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Input id standing for the implicit begin token.
    pub fn begin_input(&self) -> usize {
        self.n_actions
    }

    pub fn initial_state(&self) -> RecurrentState {
        let h = self.cfg.hidden;
        RecurrentState {
            h: vec![vec![0.0; h]; self.cfg.layers],
            c: vec![vec![0.0; h]; self.cfg.layers],
        }
    }

    fn embed(&self, input: usize) -> &[f64] {
        let e = self.cfg.embed_dim;
        &self.params[self.layout.embed + input * e..self.layout.embed + (input + 1) * e]
    }

    /// One LSTM cell step. Returns `(xh, gates, c, h)`.
    fn cell(
        &self,
        l: usize,
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.cfg.hidden;
        let d = &self.layout.lstm[l];
        let mut xh = Vec::with_capacity(x.len() + hd);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h_prev);
        let mut z = vec![0.0; 4 * hd];
        d.forward(&self.params, &xh, &mut z);
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * hd..3 * hd).contains(&k) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            c[j] = z[hd + j] * c_prev[j] + z[j] * z[2 * hd + j];
            h[j] = z[3 * hd + j] * c[j].tanh();
        }
        (xh, z, c, h)
    }

    fn head(&self, head: &[Dense; 3], x: &[f64]) -> (HeadCache, Vec<f64>) {
        let hh = self.cfg.head_hidden;
        let mut a1 = vec![0.0; hh];
        head[0].forward(&self.params, x, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let mut a2 = vec![0.0; hh];
        head[1].forward(&self.params, &a1, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; head[2].out];
        head[2].forward(&self.params, &a2, &mut out);
        (HeadCache { a1, a2 }, out)
    }

    /// Advances the recurrent state by one input token and returns the
    /// policy logits and value of the resulting state. Dropout is off.
    pub fn step(&self, state: &mut RecurrentState, input: usize) -> (Vec<f64>, f64) {
        let mut x = self.embed(input).to_vec();
        for l in 0..self.cfg.layers {
            let (_, _, c, h) = self.cell(l, &x, &state.h[l], &state.c[l]);
            state.c[l] = c;
            state.h[l] = h.clone();
            x = h;
        }
        let (_, logits) = self.head(&self.layout.pi, &x);
        let (_, v) = self.head(&self.layout.v, &x);
        (logits, v[0])
    }

    /// Runs a whole episode. `inputs[t]` is the token fed at step `t`
    /// (the begin input first). Dropout masks are drawn from `rng` when given.
    pub fn forward_episode<R: Rng + ?Sized>(
        &self,
        inputs: &[usize],
        mut rng: Option<&mut R>,
    ) -> EpisodeForward {
        let hd = self.cfg.hidden;
        let n_layers = self.cfg.layers;
        let mut layers = vec![LayerCache::default(); n_layers];
        let mut drop = vec![Vec::new(); n_layers.saturating_sub(1)];
        let mut pi = Vec::new();
        let mut v = Vec::new();
        let mut logits = Vec::new();
        let mut values = Vec::new();
        let p_drop = self.cfg.dropout;
        for &input in inputs {
            let mut x = self.embed(input).to_vec();
            for l in 0..n_layers {
                let zeros = vec![0.0; hd];
                let (h_prev, c_prev) = match layers[l].h.last() {
                    Some(h) => (h.clone(), layers[l].c.last().unwrap().clone()),
                    None => (zeros.clone(), zeros),
                };
                let (xh, gates, c, h) = self.cell(l, &x, &h_prev, &c_prev);
                layers[l].xh.push(xh);
                layers[l].gates.push(gates);
                layers[l].c.push(c);
                layers[l].h.push(h.clone());
                x = h;
                if l + 1 < n_layers {
                    let scale: Vec<f64> = match rng.as_deref_mut() {
                        Some(r) if p_drop > 0.0 => (0..hd)
                            .map(|_| {
                                if r.gen::<f64>() < p_drop {
                                    0.0
                                } else {
                                    1.0 / (1.0 - p_drop)
                                }
                            })
                            .collect(),
                        _ => vec![1.0; hd],
                    };
                    x.iter_mut().zip(&scale).for_each(|(a, s)| *a *= s);
                    drop[l].push(scale);
                }
            }
            let (pc, lg) = self.head(&self.layout.pi, &x);
            let (vc, vv) = self.head(&self.layout.v, &x);
            pi.push(pc);
            v.push(vc);
            logits.push(lg);
            values.push(vv[0]);
        }
        EpisodeForward {
            inputs: inputs.to_vec(),
            layers,
            drop,
            pi,
            v,
            logits,
            values,
        }
    }

    fn top_output(&self, fwd: &EpisodeForward, t: usize) -> Vec<f64> {
        match fwd.layers.last() {
            Some(lc) => lc.h[t].clone(),
            None => self.embed(fwd.inputs[t]).to_vec(),
        }
    }

    fn head_backward(
        &self,
        head: &[Dense; 3],
        cache: &HeadCache,
        x: &[f64],
        dout: &[f64],
        grad: &mut [f64],
        dx: &mut [f64],
    ) {
        let hh = self.cfg.head_hidden;
        let mut da2 = vec![0.0; hh];
        head[2].backward(&self.params, grad, &cache.a2, dout, Some(&mut da2));
        for (d, a) in da2.iter_mut().zip(&cache.a2) {
            *d *= 1.0 - a * a;
        }
        let mut da1 = vec![0.0; hh];
        head[1].backward(&self.params, grad, &cache.a1, &da2, Some(&mut da1));
        for (d, a) in da1.iter_mut().zip(&cache.a1) {
            *d *= 1.0 - a * a;
        }
        head[0].backward(&self.params, grad, x, &da1, Some(dx));
    }

    /// Accumulates into `grad` the gradient of a loss whose derivatives with
    /// respect to each step's logits and value are `dlogits` and `dvalues`.
    pub fn backward_episode(
        &self,
        fwd: &EpisodeForward,
        dlogits: &[Vec<f64>],
        dvalues: &[f64],
        grad: &mut [f64],
    ) {
        let steps = fwd.inputs.len();
        let hd = self.cfg.hidden;
        let top_dim = if self.cfg.layers == 0 {
            self.cfg.embed_dim
        } else {
            hd
        };
        // gradient wrt the (post-dropout) top-layer output at every step
        let mut dtop = vec![vec![0.0; top_dim]; steps];
        for t in 0..steps {
            let x = self.top_output(fwd, t);
            self.head_backward(
                &self.layout.pi,
                &fwd.pi[t],
                &x,
                &dlogits[t],
                grad,
                &mut dtop[t],
            );
            self.head_backward(
                &self.layout.v,
                &fwd.v[t],
                &x,
                &[dvalues[t]],
                grad,
                &mut dtop[t],
            );
        }
        let mut dout = dtop;
        for l in (0..self.cfg.layers).rev() {
            let d = &self.layout.lstm[l];
            let lc = &fwd.layers[l];
            let in_dim = d.inp - hd;
            let mut dinput = vec![vec![0.0; in_dim]; steps];
            let mut dh_next = vec![0.0; hd];
            let mut dc_next = vec![0.0; hd];
            let mut dzs = vec![Vec::new(); steps];
            for t in (0..steps).rev() {
                let g = &lc.gates[t];
                let c_prev: &[f64] = if t > 0 { &lc.c[t - 1] } else { &[] };
                let mut dz = vec![0.0; 4 * hd];
                for j in 0..hd {
                    let dh = dout[t][j] + dh_next[j];
                    let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let tc = lc.c[t][j].tanh();
                    let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                    let cp = if t > 0 { c_prev[j] } else { 0.0 };
                    dz[j] = dc * gg * i * (1.0 - i);
                    dz[hd + j] = dc * cp * f * (1.0 - f);
                    dz[2 * hd + j] = dc * i * (1.0 - gg * gg);
                    dz[3 * hd + j] = dh * tc * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
                let mut dxh = vec![0.0; d.inp];
                matvec_t_acc(d.weights(&self.params), d.inp, &dz, &mut dxh);
                dinput[t].copy_from_slice(&dxh[..in_dim]);
                dh_next.copy_from_slice(&dxh[in_dim..]);
                dzs[t] = dz;
            }
            // weight gradients row by row over all steps, so each row of the
            // gradient is touched once per episode
            for r in 0..d.out {
                let row = &mut grad[d.w + r * d.inp..d.w + (r + 1) * d.inp];
                let mut db = 0.0;
                for t in 0..steps {
                    let g = dzs[t][r];
                    if g != 0.0 {
                        for (gv, xv) in row.iter_mut().zip(&lc.xh[t]) {
                            *gv += g * xv;
                        }
                        db += g;
                    }
                }
                grad[d.b + r] += db;
            }
            if l > 0 {
                for (t, dv) in dinput.iter_mut().enumerate() {
                    for (a, s) in dv.iter_mut().zip(&fwd.drop[l - 1][t]) {
                        *a *= s;
                    }
                }
            }
            dout = dinput;
        }
        let e = self.cfg.embed_dim;
        for (t, &input) in fwd.inputs.iter().enumerate() {
            let off = self.layout.embed + input * e;
            for (g, d) in grad[off..off + e].iter_mut().zip(&dout[t]) {
                *g += d;
            }
        }
    }
}

/// Samples from the masked policy at a state.
pub fn sample_action<R: Rng + ?Sized>(
    logits: &[f64],
    mask: &[bool],
    rng: &mut R,
) -> Result<(usize, f64), PolicyError> {
    let logp = masked_log_softmax(logits, mask)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (a, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = Some(a);
        if u < acc {
            return Ok((a, lp));
        }
    }
    let a = last.ok_or(PolicyError::AllMasked)?;
    Ok((a, logp[a]))
}

/// Advances `state` by `input`, then samples an action under `mask`.
/// Returns `(action, log probability, value of the state)`.
pub fn act<R: Rng + ?Sized>(
    model: &PolicyModel,
    state: &mut RecurrentState,
    input: usize,
    mask: &[bool],
    rng: &mut R,
) -> Result<(usize, f64, f64), PolicyError> {
    let (logits, value) = model.step(state, input);
    let (a, lp) = sample_action(&logits, mask, rng)?;
    Ok((a, lp, value))
}
