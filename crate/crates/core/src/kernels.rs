//! Slice-level numeric kernels shared by the tape ops and the benchmarks.
//!
//! All kernels accumulate (`+=`) into their output buffers and use a fixed
//! sequential reduction order.
#![allow(clippy::needless_range_loop)]

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `da[m,k] += dy[m,n] · b[k,n]ᵀ`
pub fn matmul_grad_lhs(dy: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in dy_row.iter().zip(b_row) {
                s += x * y;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · dy[m,n]`
pub fn matmul_grad_rhs(a: &[f64], dy: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (o, &g) in db_row.iter_mut().zip(dy_row) {
                *o += av * g;
            }
        }
    }
}

/// Linear-time selective scan over `len` steps, `channels` channels and
/// `state` state entries per channel.
///
/// `h_t = a_bar_t ⊙ h_{t-1} + b_bar_t · u_t`, `y_t = <c_t, h_t> + d · u_t`, `h_0 = 0`.
/// When `states` is given it receives every `h_t` (`[len, channels, state]`).
#[allow(clippy::too_many_arguments)]
pub fn scan_forward(
    u: &[f64],
    a_bar: &[f64],
    b_bar: &[f64],
    c: &[f64],
    d: &[f64],
    len: usize,
    channels: usize,
    state: usize,
    mut states: Option<&mut [f64]>,
) -> Vec<f64> {
    let cn = channels * state;
    let mut h = vec![0.0; cn];
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        let c_t = &c[t * state..(t + 1) * state];
        let a_t = &a_bar[t * cn..(t + 1) * cn];
        let b_t = &b_bar[t * cn..(t + 1) * cn];
        for ch in 0..channels {
            let u_tc = u[t * channels + ch];
            let off = ch * state;
            let h_c = &mut h[off..off + state];
            let mut acc = 0.0;
            for s in 0..state {
                let hv = a_t[off + s] * h_c[s] + b_t[off + s] * u_tc;
                h_c[s] = hv;
                acc += c_t[s] * hv;
            }
            y[t * channels + ch] = acc + d[ch] * u_tc;
        }
        if let Some(buf) = states.as_deref_mut() {
            buf[t * cn..(t + 1) * cn].copy_from_slice(&h);
        }
    }
    y
}

pub struct ScanGrads {
    pub du: Vec<f64>,
    pub da_bar: Vec<f64>,
    pub db_bar: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

/// Reverse pass of [`scan_forward`] given the stored hidden states.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    dy: &[f64],
    u: &[f64],
    a_bar: &[f64],
    b_bar: &[f64],
    c: &[f64],
    d: &[f64],
    states: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> ScanGrads {
    let cn = channels * state;
    let mut g = vec![0.0; cn];
    let mut out = ScanGrads {
        du: vec![0.0; len * channels],
        da_bar: vec![0.0; len * cn],
        db_bar: vec![0.0; len * cn],
        dc: vec![0.0; len * state],
        dd: vec![0.0; channels],
    };
    for t in (0..len).rev() {
        let c_t = &c[t * state..(t + 1) * state];
        let h_t = &states[t * cn..(t + 1) * cn];
        let h_prev = if t > 0 {
            Some(&states[(t - 1) * cn..t * cn])
        } else {
            None
        };
        for ch in 0..channels {
            let dy_tc = dy[t * channels + ch];
            let u_tc = u[t * channels + ch];
            let off = ch * state;
            let mut du = d[ch] * dy_tc;
            out.dd[ch] += dy_tc * u_tc;
            for s in 0..state {
                let idx = off + s;
                let total = g[idx] + dy_tc * c_t[s];
                let hp = h_prev.map_or(0.0, |hp| hp[idx]);
                out.da_bar[t * cn + idx] = total * hp;
                out.db_bar[t * cn + idx] = total * u_tc;
                du += total * b_bar[t * cn + idx];
                out.dc[t * state + s] += dy_tc * h_t[idx];
                g[idx] = total * a_bar[t * cn + idx];
            }
            out.du[t * channels + ch] = du;
        }
    }
    out
}

/// [`scan_forward`] with the discretization folded in: per step
/// `a_bar = exp(delta[t,c] · a[c,n])` and `b_bar = delta[t,c] · b[t,n]` are
/// formed in registers instead of materialized as `[len, channels, state]`.
///
/// `buffers`, when given, receives `(states, a_bar)` for the reverse pass.
#[allow(clippy::too_many_arguments)]
pub fn zoh_scan_forward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    len: usize,
    channels: usize,
    state: usize,
    mut buffers: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let cn = channels * state;
    let mut h = vec![0.0; cn];
    let mut y = vec![0.0; len * channels];
    for t in 0..len {
        let b_t = &b[t * state..(t + 1) * state];
        let c_t = &c[t * state..(t + 1) * state];
        for ch in 0..channels {
            let i = t * channels + ch;
            let (u_tc, dl) = (u[i], delta[i]);
            let off = ch * state;
            let a_c = &a[off..off + state];
            let h_c = &mut h[off..off + state];
            let mut acc = 0.0;
            match buffers.as_mut() {
                Some((hs, abar)) => {
                    let base = t * cn + off;
                    for s in 0..state {
                        let ab = (dl * a_c[s]).exp();
                        let hv = ab * h_c[s] + dl * b_t[s] * u_tc;
                        h_c[s] = hv;
                        hs[base + s] = hv;
                        abar[base + s] = ab;
                        acc += c_t[s] * hv;
                    }
                }
                None => {
                    for s in 0..state {
                        let hv = (dl * a_c[s]).exp() * h_c[s] + dl * b_t[s] * u_tc;
                        h_c[s] = hv;
                        acc += c_t[s] * hv;
                    }
                }
            }
            y[i] = acc + d[ch] * u_tc;
        }
    }
    y
}

pub struct ZohScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub da: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub dd: Vec<f64>,
}

/// Reverse pass of [`zoh_scan_forward`] from its stored `(states, a_bar)`.
#[allow(clippy::too_many_arguments)]
pub fn zoh_scan_backward(
    dy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    states: &[f64],
    a_bar: &[f64],
    len: usize,
    channels: usize,
    state: usize,
) -> ZohScanGrads {
    let cn = channels * state;
    let mut g = vec![0.0; cn];
    let mut out = ZohScanGrads {
        du: vec![0.0; len * channels],
        ddelta: vec![0.0; len * channels],
        da: vec![0.0; cn],
        db: vec![0.0; len * state],
        dc: vec![0.0; len * state],
        dd: vec![0.0; channels],
    };
    for t in (0..len).rev() {
        let b_t = &b[t * state..(t + 1) * state];
        let c_t = &c[t * state..(t + 1) * state];
        let h_t = &states[t * cn..(t + 1) * cn];
        for ch in 0..channels {
            let i = t * channels + ch;
            let (dy_tc, u_tc, dl) = (dy[i], u[i], delta[i]);
            let off = ch * state;
            let mut du = d[ch] * dy_tc;
            let mut ddl = 0.0;
            out.dd[ch] += dy_tc * u_tc;
            for s in 0..state {
                let idx = off + s;
                // dL/dh_t: carried from t+1 plus the readout at t.
                let total = g[idx] + dy_tc * c_t[s];
                let hp = if t > 0 {
                    states[(t - 1) * cn + idx]
                } else {
                    0.0
                };
                let ab = a_bar[t * cn + idx];
                let d_ab = total * hp * ab;
                let d_bb = total * u_tc;
                ddl += d_ab * a[idx] + d_bb * b_t[s];
                out.da[idx] += d_ab * dl;
                out.db[t * state + s] += d_bb * dl;
                du += total * dl * b_t[s];
                out.dc[t * state + s] += dy_tc * h_t[idx];
                g[idx] = total * ab;
            }
            out.du[i] = du;
            out.ddelta[i] = ddl;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    // y + ln(1 - e^{-y})
    y + (-(-y).exp_m1()).ln()
}
