//! Discretized selective-scan recurrence.
//!
//! For every channel `d` and state slot `n` the scan evolves
//!
//! ```text
//! abar[t,d,n] = exp(delta[t,d] * A[d,n])          A = -exp(a_log)
//! bbar[t,d,n] = delta[t,d] * b[t,n]
//! h[t,d,n]    = abar[t,d,n] * h[t-1,d,n] + bbar[t,d,n] * x[t,d]
//! y[t,d]      = sum_n c[t,n] * h[t,d,n]
//! ```
//!
//! with `h[-1] = 0` unless a carried state is supplied. Positions are 0-based.
//! All buffers are row-major; `[T x D x N]` tensors index as `(t * D + d) * N + n`.

use crate::error::{Error, Result};
use crate::numeric::Real;

/// Inputs of one selective scan over a sequence of `len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams<F> {
    pub d_inner: usize,
    pub d_state: usize,
    /// `[d_inner x d_state]`, decay is `A = -exp(a_log)`.
    pub a_log: Vec<F>,
    /// `[len x d_inner]`, strictly positive step sizes.
    pub delta: Vec<F>,
    /// `[len x d_state]`
    pub b: Vec<F>,
    /// `[len x d_state]`
    pub c: Vec<F>,
    /// `[len x d_inner]`
    pub x: Vec<F>,
}

impl<F: Real> ScanParams<F> {
    pub fn new(
        d_inner: usize,
        d_state: usize,
        a_log: Vec<F>,
        delta: Vec<F>,
        b: Vec<F>,
        c: Vec<F>,
        x: Vec<F>,
    ) -> Result<Self> {
        let params = Self {
            d_inner,
            d_state,
            a_log,
            delta,
            b,
            c,
            x,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.delta.len().checked_div(self.d_inner).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shapes, positivity of `delta` and finiteness of every input.
    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d_inner, self.d_state);
        if d == 0 || n == 0 {
            return Err(Error::Shape(format!(
                "d_inner={d}, d_state={n} must be >= 1"
            )));
        }
        if self.a_log.len() != d * n {
            return Err(Error::Shape(format!(
                "a_log has {} entries, expected {}",
                self.a_log.len(),
                d * n
            )));
        }
        if self.delta.is_empty() || !self.delta.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "delta has {} entries, not a positive multiple of d_inner={d}",
                self.delta.len()
            )));
        }
        let t = self.delta.len() / d;
        for (name, buf, width) in [("b", &self.b, n), ("c", &self.c, n), ("x", &self.x, d)] {
            if buf.len() != t * width {
                return Err(Error::Shape(format!(
                    "{name} has {} entries, expected {t} x {width}",
                    buf.len()
                )));
            }
        }
        if let Some(i) = self
            .delta
            .iter()
            .position(|v| !(v.is_finite() && *v > F::zero()))
        {
            return Err(Error::InvalidValue(format!(
                "delta[{}, {}] must be finite and > 0",
                i / d,
                i % d
            )));
        }
        for (name, buf) in [
            ("a_log", &self.a_log),
            ("b", &self.b),
            ("c", &self.c),
            ("x", &self.x),
        ] {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "{name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Continuous-time decay `A = -exp(a_log)`, `[d_inner x d_state]`.
    pub fn decay_rates(&self) -> Vec<F> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }

    /// Row `t` of `c`.
    pub fn c_row(&self, t: usize) -> &[F] {
        &self.c[t * self.d_state..(t + 1) * self.d_state]
    }

    /// Copy of the tokens `range` as a standalone scan.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let (d, n) = (self.d_inner, self.d_state);
        Self {
            d_inner: d,
            d_state: n,
            a_log: self.a_log.clone(),
            delta: self.delta[range.start * d..range.end * d].to_vec(),
            b: self.b[range.start * n..range.end * n].to_vec(),
            c: self.c[range.start * n..range.end * n].to_vec(),
            x: self.x[range.start * d..range.end * d].to_vec(),
        }
    }
}

/// Zero-order-hold decay and Euler input matrices, each `[T x d_inner x d_state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized<F> {
    pub abar: Vec<F>,
    pub bbar: Vec<F>,
}

/// Everything recorded while scanning a sequence.
///
/// `x` and `c` are copies of the scan inputs so the trace alone suffices for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace<F> {
    pub d_inner: usize,
    pub d_state: usize,
    pub abar: Vec<F>,
    pub bbar: Vec<F>,
    pub h: Vec<F>,
    pub y: Vec<F>,
    pub x: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Real> ScanTrace<F> {
    pub fn len(&self) -> usize {
        self.y.len() / self.d_inner
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y_row(&self, t: usize) -> &[F] {
        &self.y[t * self.d_inner..(t + 1) * self.d_inner]
    }

    pub fn c_row(&self, t: usize) -> &[F] {
        &self.c[t * self.d_state..(t + 1) * self.d_state]
    }
}

pub fn discretize<F: Real>(params: &ScanParams<F>) -> Result<Discretized<F>> {
    params.validate()?;
    let (d_inner, d_state, len) = (params.d_inner, params.d_state, params.len());
    let a = params.decay_rates();
    let mut abar = Vec::with_capacity(len * d_inner * d_state);
    let mut bbar = Vec::with_capacity(len * d_inner * d_state);
    for t in 0..len {
        let b_row = &params.b[t * d_state..(t + 1) * d_state];
        for d in 0..d_inner {
            let dt = params.delta[t * d_inner + d];
            let a_row = &a[d * d_state..(d + 1) * d_state];
            for (a_dn, b_n) in a_row.iter().zip(b_row) {
                abar.push((dt * *a_dn).exp());
                bbar.push(dt * *b_n);
            }
        }
    }
    Ok(Discretized { abar, bbar })
}

/// Full scan from `h = 0`, recording every intermediate.
pub fn selective_scan<F: Real>(params: &ScanParams<F>) -> Result<ScanTrace<F>> {
    let disc = discretize(params)?;
    scan_discretized(
        params.d_inner,
        params.d_state,
        disc.abar,
        disc.bbar,
        &params.c,
        &params.x,
    )
}

/// Runs the recurrence on already-discretized matrices. This is the trace-level entry
/// point used to inject degenerate `abar`/`bbar` that no positive step size can produce.
pub fn scan_discretized<F: Real>(
    d_inner: usize,
    d_state: usize,
    abar: Vec<F>,
    bbar: Vec<F>,
    c: &[F],
    x: &[F],
) -> Result<ScanTrace<F>> {
    if d_inner == 0 || d_state == 0 || !x.len().is_multiple_of(d_inner) || x.is_empty() {
        return Err(Error::Shape("scan_discretized: bad x shape".into()));
    }
    let len = x.len() / d_inner;
    let cube = len * d_inner * d_state;
    if abar.len() != cube || bbar.len() != cube || c.len() != len * d_state {
        return Err(Error::Shape(format!(
            "scan_discretized: expected abar/bbar of {cube} and c of {} entries",
            len * d_state
        )));
    }
    let mut h = vec![F::zero(); cube];
    let mut y = vec![F::zero(); len * d_inner];
    for t in 0..len {
        let c_row = &c[t * d_state..(t + 1) * d_state];
        for d in 0..d_inner {
            let base = (t * d_inner + d) * d_state;
            let xd = x[t * d_inner + d];
            let mut acc = F::zero();
            for n in 0..d_state {
                let prev = if t == 0 {
                    F::zero()
                } else {
                    h[base - d_inner * d_state + n]
                };
                let hn = abar[base + n] * prev + bbar[base + n] * xd;
                h[base + n] = hn;
                acc = acc + c_row[n] * hn;
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite {
                    step: t,
                    what: "scan output",
                });
            }
            y[t * d_inner + d] = acc;
        }
    }
    Ok(ScanTrace {
        d_inner,
        d_state,
        abar,
        bbar,
        h,
        y,
        x: x.to_vec(),
        c: c.to_vec(),
    })
}

/// Outputs of a scan that keeps only the running state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput<F> {
    /// `[len x d_inner]`
    pub y: Vec<F>,
    /// State after the last token, `[d_inner x d_state]`.
    pub h_last: Vec<F>,
}

/// Memory-light scan used by the model forward pass: `O(d_inner * d_state)` state,
/// optional carried-in state for chunked prefill.
pub fn selective_scan_outputs<F: Real>(
    params: &ScanParams<F>,
    h0: Option<&[F]>,
) -> Result<ScanOutput<F>> {
    params.validate()?;
    scan_outputs_unchecked(params, h0)
}

/// [`selective_scan_outputs`] without input validation; a non-finite output is still
/// reported with its step.
pub(crate) fn scan_outputs_unchecked<F: Real>(
    params: &ScanParams<F>,
    h0: Option<&[F]>,
) -> Result<ScanOutput<F>> {
    let (d_inner, d_state) = (params.d_inner, params.d_state);
    let a = transpose(&params.decay_rates(), d_inner, d_state);
    let mut h = match h0 {
        Some(h0) if h0.len() != d_inner * d_state => {
            return Err(Error::Shape(format!(
                "carried state has {} entries, expected {}",
                h0.len(),
                d_inner * d_state
            )))
        }
        Some(h0) => transpose(h0, d_inner, d_state),
        None => vec![F::zero(); d_inner * d_state],
    };
    let mut y = vec![F::zero(); params.len() * d_inner];
    scan_rows(params, &a, &mut h, &mut y)?;
    Ok(ScanOutput {
        y,
        h_last: transpose(&h, d_state, d_inner),
    })
}

/// `[rows x cols]` to `[cols x rows]`.
pub(crate) fn transpose<F: Copy>(m: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(m.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| m[r * cols + c]));
    }
    out
}

crate::numeric::multiversion!(
    fn scan_rows<F: Real>(params: &ScanParams<F>, a_t: &[F], h_t: &mut [F], y: &mut [F]) -> Result<()>
        => scan_rows_body
);

/// Scan with decay rates and state stored state-major (`[d_state x d_inner]`) so the
/// inner loops run over contiguous channels.
#[inline(always)]
fn scan_rows_body<F: Real>(
    params: &ScanParams<F>,
    a_t: &[F],
    h_t: &mut [F],
    y: &mut [F],
) -> Result<()> {
    let (d_inner, d_state) = (params.d_inner, params.d_state);
    let mut dx = vec![F::zero(); d_inner];
    for t in 0..params.len() {
        let b_row = &params.b[t * d_state..(t + 1) * d_state];
        let c_row = &params.c[t * d_state..(t + 1) * d_state];
        let dt_row = &params.delta[t * d_inner..(t + 1) * d_inner];
        let x_row = &params.x[t * d_inner..(t + 1) * d_inner];
        for ((o, dt), x) in dx.iter_mut().zip(dt_row).zip(x_row) {
            *o = *dt * *x;
        }
        let y_row = &mut y[t * d_inner..(t + 1) * d_inner];
        for n in 0..d_state {
            let (bn, cn) = (b_row[n], c_row[n]);
            let a_row = &a_t[n * d_inner..(n + 1) * d_inner];
            let h_row = &mut h_t[n * d_inner..(n + 1) * d_inner];
            for ((((hv, av), dt), dxv), yv) in h_row
                .iter_mut()
                .zip(a_row)
                .zip(dt_row)
                .zip(&dx)
                .zip(y_row.iter_mut())
            {
                *hv = (*dt * *av).exp_fast() * *hv + *dxv * bn;
                *yv = *yv + cn * *hv;
            }
        }
        if y_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "scan output",
            });
        }
    }
    Ok(())
}

/// How the leave-one-out rerun treats the removed token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Removal {
    /// Drop only the input injection `bbar_t * x_t`; the decay `abar_t` still applies.
    Injection,
    /// Skip the token entirely (`h_t = h_{t-1}`). Kept as a comparison variant; it is
    /// not the quantity the influence score measures.
    WholeToken,
}

/// Final output row `y_{T-1}` of a scan in which token `t` is removed
/// (`Removal::Injection` semantics).
pub fn leave_one_out<F: Real>(params: &ScanParams<F>, t: usize) -> Result<Vec<F>> {
    leave_one_out_with(params, t, Removal::Injection)
}

pub fn leave_one_out_with<F: Real>(
    params: &ScanParams<F>,
    t: usize,
    removal: Removal,
) -> Result<Vec<F>> {
    params.validate()?;
    let len = params.len();
    if t >= len {
        return Err(Error::OutOfRange { index: t, len });
    }
    let (d_inner, d_state) = (params.d_inner, params.d_state);
    let a = params.decay_rates();
    let mut h = vec![F::zero(); d_inner * d_state];
    for s in 0..len {
        if s == t && removal == Removal::WholeToken {
            continue;
        }
        let inject = s != t;
        for d in 0..d_inner {
            let dt = params.delta[s * d_inner + d];
            let xd = params.x[s * d_inner + d];
            for n in 0..d_state {
                let abar = (dt * a[d * d_state + n]).exp();
                let i = d * d_state + n;
                h[i] = abar * h[i];
                if inject {
                    h[i] = h[i] + dt * params.b[s * d_state + n] * xd;
                }
            }
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: s,
                what: "leave-one-out state",
            });
        }
    }
    let c_last = params.c_row(len - 1);
    Ok((0..d_inner)
        .map(|d| (0..d_state).map(|n| c_last[n] * h[d * d_state + n]).sum())
        .collect())
}
