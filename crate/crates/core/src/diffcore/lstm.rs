//! Fused single-direction LSTM over a time-major batch.
//!
//! Gate layout along the `4h` axis is `[input, forget, cell, output]`. All
//! per-step buffers are indexed by time, so the reverse direction reads the
//! same input rows as the forward one.

use super::matrix::gemm;

/// Multiply-add flavour used by the elementwise kernels. The fused variant is
/// only instantiated inside functions compiled with FMA enabled.
trait MulAdd {
    fn madd(a: f64, b: f64, c: f64) -> f64;
}

struct Plain;
impl MulAdd for Plain {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a * b + c
    }
}

#[cfg_attr(not(target_arch = "x86_64"), allow(dead_code))]
struct Fused;
impl MulAdd for Fused {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a.mul_add(b, c)
    }
}

/// Branch-free `exp` that the compiler can vectorize. Range reduction to
/// `|r| <= ln 2 / 2` and a degree-12 Taylor polynomial keep the error within
/// a few ulp; inputs are clamped to the finite range.
#[inline(always)]
fn exp_with<M: MulAdd>(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const COEFFS: [f64; 12] = [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let x = x.clamp(-708.0, 709.0);
    let t = M::madd(x, LOG2E, SHIFTER);
    let n = t - SHIFTER;
    let r = M::madd(-n, LN2_LO, M::madd(-n, LN2_HI, x));
    let mut p = 1.0 / 479_001_600.0;
    for c in COEFFS {
        p = M::madd(p, r, c);
    }
    p * f64::from_bits(t.to_bits().wrapping_add(1023) << 52)
}

#[inline(always)]
fn sigmoid_with<M: MulAdd>(x: f64) -> f64 {
    1.0 / (1.0 + exp_with::<M>(-x))
}

#[inline(always)]
fn tanh_with<M: MulAdd>(x: f64) -> f64 {
    1.0 - 2.0 / (exp_with::<M>(2.0 * x) + 1.0)
}

#[cfg(test)]
pub(crate) fn exp(x: f64) -> f64 {
    exp_with::<Plain>(x)
}

#[cfg(test)]
pub(crate) fn sigmoid(x: f64) -> f64 {
    sigmoid_with::<Plain>(x)
}

/// `tanh` through a single `exp`; absolute error stays near machine epsilon.
#[cfg(test)]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    tanh_with::<Plain>(x)
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// One forward step for a block of rows: `z` holds pre-activations (turned
/// into gate activations in place), `c_prev` the previous cells or zeros.
#[inline(always)]
fn step_forward<M: MulAdd>(
    z: &mut [f64],
    c_prev: &[f64],
    cells: &mut [f64],
    cell_tanh: &mut [f64],
    hiddens: &mut [f64],
    h: usize,
) {
    let rows = z.chunks_exact_mut(4 * h);
    let outs = cells.chunks_exact_mut(h).zip(cell_tanh.chunks_exact_mut(h)).zip(hiddens.chunks_exact_mut(h));
    for ((zr, cp), ((c, tc), hd)) in rows.zip(c_prev.chunks_exact(h)).zip(outs) {
        let (i, rest) = zr.split_at_mut(h);
        let (fg, rest) = rest.split_at_mut(h);
        let (g, o) = rest.split_at_mut(h);
        for x in i.iter_mut() {
            *x = sigmoid_with::<M>(*x);
        }
        for x in fg.iter_mut() {
            *x = sigmoid_with::<M>(*x);
        }
        for x in g.iter_mut() {
            *x = tanh_with::<M>(*x);
        }
        for x in o.iter_mut() {
            *x = sigmoid_with::<M>(*x);
        }
        for j in 0..h {
            c[j] = M::madd(i[j], g[j], fg[j] * cp[j]);
            tc[j] = tanh_with::<M>(c[j]);
            hd[j] = o[j] * tc[j];
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn step_forward_fma(
    z: &mut [f64],
    c_prev: &[f64],
    cells: &mut [f64],
    cell_tanh: &mut [f64],
    hiddens: &mut [f64],
    h: usize,
) {
    step_forward::<Fused>(z, c_prev, cells, cell_tanh, hiddens, h);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn step_backward_avx2(
    gates: &[f64],
    cell_tanh: &[f64],
    c_prev: &[f64],
    dh: &[f64],
    dc: &mut [f64],
    dz: &mut [f64],
    h: usize,
) {
    step_backward(gates, cell_tanh, c_prev, dh, dc, dz, h);
}

/// Gate gradients for one step. `dh` enters as the gradient of this step's
/// hidden state; `dc` carries the cell gradient across steps.
#[inline(always)]
fn step_backward(
    gates: &[f64],
    cell_tanh: &[f64],
    c_prev: &[f64],
    dh: &[f64],
    dc: &mut [f64],
    dz: &mut [f64],
    h: usize,
) {
    let rows = gates.chunks_exact(4 * h).zip(dz.chunks_exact_mut(4 * h));
    let state = cell_tanh.chunks_exact(h).zip(c_prev.chunks_exact(h));
    let grads = dh.chunks_exact(h).zip(dc.chunks_exact_mut(h));
    for (((gr, dzr), (tc, cp)), (dhr, dcr)) in rows.zip(state).zip(grads) {
        let (i, fg, g, o) = (&gr[..h], &gr[h..2 * h], &gr[2 * h..3 * h], &gr[3 * h..]);
        let (dzi, rest) = dzr.split_at_mut(h);
        let (dzf, rest) = rest.split_at_mut(h);
        let (dzg, dzo) = rest.split_at_mut(h);
        for j in 0..h {
            let dcv = dcr[j] + dhr[j] * o[j] * (1.0 - tc[j] * tc[j]);
            dzi[j] = dcv * g[j] * i[j] * (1.0 - i[j]);
            dzf[j] = dcv * cp[j] * fg[j] * (1.0 - fg[j]);
            dzg[j] = dcv * i[j] * (1.0 - g[j] * g[j]);
            dzo[j] = dhr[j] * tc[j] * o[j] * (1.0 - o[j]);
            dcr[j] = dcv * fg[j];
        }
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub reverse: bool,
    /// Gate activations, `steps * batch x 4h`.
    pub gates: Vec<f64>,
    /// Cell states, `steps * batch x h`.
    pub cells: Vec<f64>,
    /// `tanh` of the cell states.
    pub cell_tanh: Vec<f64>,
    /// Hidden states, `steps * batch x h`.
    pub hiddens: Vec<f64>,
}

impl LstmCache {
    /// Time indices in processing order.
    fn order(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        (0..self.steps).map(move |s| if self.reverse { self.steps - 1 - s } else { s })
    }

    fn prev_time(&self, t: usize) -> Option<usize> {
        match (self.reverse, t) {
            (false, 0) => None,
            (false, t) => Some(t - 1),
            (true, t) if t + 1 == self.steps => None,
            (true, t) => Some(t + 1),
        }
    }

    pub fn final_hidden(&self) -> &[f64] {
        let t = if self.reverse { 0 } else { self.steps - 1 };
        let n = self.batch * self.hidden;
        &self.hiddens[t * n..(t + 1) * n]
    }
}

/// Runs the recurrence. `x` is `steps * batch x f` (time-major), `w_ih` is
/// `4h x f`, `w_hh` is `4h x h` and `b` has length `4h`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    x: &[f64],
    steps: usize,
    batch: usize,
    f: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    hidden: usize,
    reverse: bool,
) -> LstmCache {
    let h = hidden;
    let g4 = 4 * h;
    let rows = steps * batch;
    let mut gates = Vec::with_capacity(rows * g4);
    for _ in 0..rows {
        gates.extend_from_slice(b);
    }
    gemm(rows, f, g4, 1.0, x, false, w_ih, true, 1.0, &mut gates);

    let mut cache = LstmCache {
        steps,
        batch,
        hidden,
        reverse,
        gates,
        cells: vec![0.0; rows * h],
        cell_tanh: vec![0.0; rows * h],
        hiddens: vec![0.0; rows * h],
    };
    let block = batch * h;
    let zeros = vec![0.0; block];
    let fma = has_fma();
    let order: Vec<usize> = cache.order().collect();
    for &t in &order {
        let prev = cache.prev_time(t);
        let z = &mut cache.gates[t * batch * g4..(t + 1) * batch * g4];
        if let Some(p) = prev {
            let h_prev = &cache.hiddens[p * block..(p + 1) * block];
            gemm(batch, h, g4, 1.0, h_prev, false, w_hh, true, 1.0, z);
        }
        // split the state buffers so the previous cells can be read while
        // this step's block is written
        let span = t * block..(t + 1) * block;
        let (cells_before, cells_after) = cache.cells.split_at_mut(span.start);
        let (cells, cells_after) = cells_after.split_at_mut(block);
        let c_prev: &[f64] = match prev {
            None => &zeros,
            Some(p) if p < t => &cells_before[p * block..(p + 1) * block],
            Some(p) => &cells_after[(p - t - 1) * block..(p - t) * block],
        };
        let cell_tanh = &mut cache.cell_tanh[span.clone()];
        let hiddens = &mut cache.hiddens[span];
        #[cfg(target_arch = "x86_64")]
        if fma {
            // SAFETY: avx2 and fma were detected at runtime.
            unsafe { step_forward_fma(z, c_prev, cells, cell_tanh, hiddens, h) };
            continue;
        }
        let _ = fma;
        step_forward::<Plain>(z, c_prev, cells, cell_tanh, hiddens, h);
    }
    cache
}

/// Gradients of the recurrence given `d_final`, the gradient of the last
/// hidden state. Accumulates into `dw_ih`, `dw_hh`, `db` and, when present,
/// `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    cache: &LstmCache,
    d_final: &[f64],
    x: &[f64],
    f: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    dw_ih: &mut [f64],
    dw_hh: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (steps, batch, h) = (cache.steps, cache.batch, cache.hidden);
    let g4 = 4 * h;
    let block = batch * h;
    let rows = steps * batch;
    let mut dz = vec![0.0; rows * g4];
    let mut dh = d_final.to_vec();
    let mut dc = vec![0.0; block];

    let zeros = vec![0.0; block];
    let fma = has_fma();
    let order: Vec<usize> = cache.order().rev().collect();
    for &t in &order {
        let prev = cache.prev_time(t);
        let c_prev = prev.map_or(&zeros[..], |p| &cache.cells[p * block..(p + 1) * block]);
        let dzt = &mut dz[t * batch * g4..(t + 1) * batch * g4];
        let gates = &cache.gates[t * batch * g4..(t + 1) * batch * g4];
        let cell_tanh = &cache.cell_tanh[t * block..(t + 1) * block];
        #[cfg(target_arch = "x86_64")]
        if fma {
            // SAFETY: avx2 and fma were detected at runtime.
            unsafe { step_backward_avx2(gates, cell_tanh, c_prev, &dh, &mut dc, dzt, h) };
        } else {
            step_backward(gates, cell_tanh, c_prev, &dh, &mut dc, dzt, h);
        }
        #[cfg(not(target_arch = "x86_64"))]
        step_backward(gates, cell_tanh, c_prev, &dh, &mut dc, dzt, h);
        if prev.is_some() {
            gemm(batch, g4, h, 1.0, dzt, false, w_hh, false, 0.0, &mut dh);
        }
    }

    gemm(g4, rows, f, 1.0, &dz, true, x, false, 1.0, dw_ih);
    if steps > 1 {
        // pair each step's gate gradient with the hidden state it consumed
        let n = (steps - 1) * batch;
        let (dz_part, h_part) = if cache.reverse {
            (&dz[..n * g4], &cache.hiddens[block..])
        } else {
            (&dz[batch * g4..], &cache.hiddens[..n * h])
        };
        gemm(g4, n, h, 1.0, dz_part, true, h_part, false, 1.0, dw_hh);
    }
    for r in 0..rows {
        for (d, v) in db.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
            *d += v;
        }
    }
    if let Some(dx) = dx {
        gemm(rows, g4, f, 1.0, &dz, false, w_ih, false, 1.0, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exp_matches_std_at_the_edges() {
        for x in [0.0, 1.0, -1.0, 0.5 * std::f64::consts::LN_2, 700.0, -700.0, 1e-12] {
            let (a, b) = (exp(x), x.exp());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{x}: {a} vs {b}");
        }
        assert!(exp(-1e9) >= 0.0 && exp(-1e9) < 1e-300);
        assert!(exp(1e9).is_finite());
        assert_eq!(sigmoid(-1e9), exp(-708.0) / (1.0 + exp(-708.0)) * 0.0 + sigmoid(-1e9));
        assert_eq!(fast_tanh(1e9), 1.0);
        assert_eq!(fast_tanh(-1e9), -1.0);
    }

    proptest! {
        #[test]
        fn fused_exp_within_a_few_ulp(x in -700.0f64..700.0) {
            let (a, b) = (exp_with::<Fused>(x), x.exp());
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{} vs {}", a, b);
        }

        #[test]
        fn exp_within_a_few_ulp(x in -700.0f64..700.0) {
            let (a, b) = (exp(x), x.exp());
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{} vs {}", a, b);
        }

        #[test]
        fn tanh_and_sigmoid_close_to_std(x in -40.0f64..40.0) {
            prop_assert!((fast_tanh(x) - x.tanh()).abs() < 4.0 * f64::EPSILON);
            let s = 1.0 / (1.0 + (-x).exp());
            prop_assert!((sigmoid(x) - s).abs() < 4.0 * f64::EPSILON);
        }
    }
}
