//! Max, average, stochastic and multipartite pooling, with switch recording
//! for the backward pass.
//!
//! Every operator works frame by frame, so frames are processed under the
//! chosen [`Exec`] policy with identical results either way. Ties inside a
//! window always resolve to the first position in row-major order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::projection::{project, Projection};
use crate::ranking::{score_instances_with, RankingModel};
use crate::tensor::{flatten_stack, unflatten_scores, ActivationStack, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Max,
    Average,
    Stochastic,
    Multipartite,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Max,
        Strategy::Average,
        Strategy::Stochastic,
        Strategy::Multipartite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Max => "max",
            Strategy::Average => "average",
            Strategy::Stochastic => "stochastic",
            Strategy::Multipartite => "multipartite",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Strategy::Max),
            "average" | "avg" | "mean" => Ok(Strategy::Average),
            "stochastic" => Ok(Strategy::Stochastic),
            "multipartite" => Ok(Strategy::Multipartite),
            other => Err(Error::InvalidConfig(format!(
                "unknown pooling strategy {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub strategy: Strategy,
}

impl PoolSpec {
    /// Non-overlapping `size × size` windows.
    pub fn square(size: usize, strategy: Strategy) -> Self {
        Self {
            window: (size, size),
            stride: (size, size),
            strategy,
        }
    }

    /// Output height and width for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.window;
        let (sh, sw) = self.stride;
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidConfig(format!(
                "pool window/stride must be positive: {self:?}"
            )));
        }
        if h < ph || w < pw || (h - ph) % sh != 0 || (w - pw) % sw != 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} input does not tile with window {ph}x{pw} and stride {sh}x{sw}"
            )));
        }
        Ok(((h - ph) / sh + 1, (w - pw) / sw + 1))
    }
}

/// Where each output came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Switches {
    /// Flat input index per output element (max, stochastic training).
    PerChannel(Vec<usize>),
    /// In-frame pixel offset `y·w + x` per `(frame, oy, ox)`, shared by every
    /// channel (multipartite).
    Spatial(Vec<usize>),
    /// Every window position weighs `1/(ph·pw)` (average).
    Uniform,
    /// `∂out/∂in` for each window position, `ph·pw` per output element
    /// (stochastic evaluation).
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolForward {
    pub output: ActivationStack,
    pub switches: Switches,
    pub input_dims: (usize, usize, usize, usize),
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

struct Geometry {
    h: usize,
    w: usize,
    d: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
    sh: usize,
    sw: usize,
}

impl Geometry {
    fn new(stack: &ActivationStack, spec: &PoolSpec) -> Result<Self> {
        let (oh, ow) = spec.output_hw(stack.h(), stack.w())?;
        Ok(Self {
            h: stack.h(),
            w: stack.w(),
            d: stack.d(),
            oh,
            ow,
            ph: spec.window.0,
            pw: spec.window.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
        })
    }

    fn out_frame_len(&self) -> usize {
        self.oh * self.ow * self.d
    }

    /// In-frame pixel offsets of the window at `(oy, ox)`, row-major.
    fn window_pixels(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let y0 = oy * self.sh;
        let x0 = ox * self.sw;
        (0..self.ph).flat_map(move |dy| (0..self.pw).map(move |dx| (y0 + dy) * self.w + x0 + dx))
    }
}

fn assemble(
    g: &Geometry,
    n: usize,
    frames: Vec<(Vec<f64>, Vec<usize>)>,
    spec: &PoolSpec,
    per_channel: bool,
) -> PoolForward {
    let mut out = Vec::with_capacity(n * g.out_frame_len());
    let mut sw = Vec::new();
    for (o, s) in frames {
        out.extend_from_slice(&o);
        sw.extend_from_slice(&s);
    }
    PoolForward {
        output: ActivationStack::from_raw(n, g.oh, g.ow, g.d, out),
        switches: if per_channel {
            Switches::PerChannel(sw)
        } else {
            Switches::Spatial(sw)
        },
        input_dims: (n, g.h, g.w, g.d),
        window: spec.window,
        stride: spec.stride,
    }
}

/// Per-channel maximum; the switch is the first maximal position.
pub fn pool_max(stack: &ActivationStack, spec: &PoolSpec) -> Result<PoolForward> {
    pool_max_with(Exec::default(), stack, spec)
}

pub fn pool_max_with(exec: Exec, stack: &ActivationStack, spec: &PoolSpec) -> Result<PoolForward> {
    let g = Geometry::new(stack, spec)?;
    let frames = exec::map_indexed(exec, stack.n(), |f| {
        let base = f * stack.frame_len();
        let src = stack.frame(f);
        let mut out = Vec::with_capacity(g.out_frame_len());
        let mut sw = Vec::with_capacity(g.out_frame_len());
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for c in 0..g.d {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for p in g.window_pixels(oy, ox) {
                        let v = src[p * g.d + c];
                        if v > best {
                            best = v;
                            arg = p;
                        }
                    }
                    out.push(best);
                    sw.push(base + arg * g.d + c);
                }
            }
        }
        (out, sw)
    });
    Ok(assemble(&g, stack.n(), frames, spec, true))
}

/// Per-channel window mean.
pub fn pool_average(stack: &ActivationStack, spec: &PoolSpec) -> Result<PoolForward> {
    pool_average_with(Exec::default(), stack, spec)
}

pub fn pool_average_with(
    exec: Exec,
    stack: &ActivationStack,
    spec: &PoolSpec,
) -> Result<PoolForward> {
    let g = Geometry::new(stack, spec)?;
    let k = (g.ph * g.pw) as f64;
    let frames = exec::map_indexed(exec, stack.n(), |f| {
        let src = stack.frame(f);
        let mut out = Vec::with_capacity(g.out_frame_len());
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for c in 0..g.d {
                    let s: f64 = g.window_pixels(oy, ox).map(|p| src[p * g.d + c]).sum();
                    out.push(s / k);
                }
            }
        }
        (out, Vec::new())
    });
    let mut fwd = assemble(&g, stack.n(), frames, spec, true);
    fwd.switches = Switches::Uniform;
    Ok(fwd)
}

/// Stochastic pooling. Negative activations count as zero probability mass.
///
/// In training mode one position per window and channel is drawn with
/// probability proportional to its activation (uniformly when the window has
/// no positive mass). Otherwise the output is the probability-weighted
/// average `Σ p_k a_k`, or the plain mean for a window with no positive mass.
/// Frame `f` draws from a ChaCha stream `f` keyed by `seed`, so results do not
/// depend on the execution policy.
pub fn pool_stochastic(
    stack: &ActivationStack,
    spec: &PoolSpec,
    seed: u64,
    train_mode: bool,
) -> Result<PoolForward> {
    pool_stochastic_with(Exec::default(), stack, spec, seed, train_mode)
}

pub fn pool_stochastic_with(
    exec: Exec,
    stack: &ActivationStack,
    spec: &PoolSpec,
    seed: u64,
    train_mode: bool,
) -> Result<PoolForward> {
    let g = Geometry::new(stack, spec)?;
    let k = g.ph * g.pw;
    if train_mode {
        let frames = exec::map_indexed(exec, stack.n(), |f| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64);
            let base = f * stack.frame_len();
            let src = stack.frame(f);
            let mut out = Vec::with_capacity(g.out_frame_len());
            let mut sw = Vec::with_capacity(g.out_frame_len());
            let mut pix = Vec::with_capacity(k);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    pix.clear();
                    pix.extend(g.window_pixels(oy, ox));
                    for c in 0..g.d {
                        let total: f64 = pix.iter().map(|&p| src[p * g.d + c].max(0.0)).sum();
                        let chosen = if total > 0.0 {
                            let u = rng.gen::<f64>() * total;
                            let mut acc = 0.0;
                            let mut pick = None;
                            for &p in &pix {
                                let a = src[p * g.d + c].max(0.0);
                                acc += a;
                                if a > 0.0 && u < acc {
                                    pick = Some(p);
                                    break;
                                }
                            }
                            // Rounding can leave u at the very top of the
                            // cumulative sum; take the last positive entry.
                            pick.unwrap_or_else(|| {
                                *pix.iter()
                                    .rev()
                                    .find(|&&p| src[p * g.d + c] > 0.0)
                                    .expect("positive mass")
                            })
                        } else {
                            pix[rng.gen_range(0..k)]
                        };
                        out.push(src[chosen * g.d + c]);
                        sw.push(base + chosen * g.d + c);
                    }
                }
            }
            (out, sw)
        });
        return Ok(assemble(&g, stack.n(), frames, spec, true));
    }

    let per_frame = exec::map_indexed(exec, stack.n(), |f| {
        let src = stack.frame(f);
        let mut out = Vec::with_capacity(g.out_frame_len());
        let mut weights = Vec::with_capacity(g.out_frame_len() * k);
        let mut pix = Vec::with_capacity(k);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                pix.clear();
                pix.extend(g.window_pixels(oy, ox));
                for c in 0..g.d {
                    let vals = pix.iter().map(|&p| src[p * g.d + c]);
                    let total: f64 = vals.clone().map(|a| a.max(0.0)).sum();
                    if total > 0.0 {
                        let sq: f64 = vals.clone().map(|a| a.max(0.0) * a.max(0.0)).sum();
                        out.push(sq / total);
                        // ∂(Σa²/Σa)/∂a_j = (2 a_j S − Q) / S² on the positive part.
                        weights.extend(vals.map(|a| {
                            if a > 0.0 {
                                (2.0 * a * total - sq) / (total * total)
                            } else {
                                0.0
                            }
                        }));
                    } else {
                        out.push(vals.sum::<f64>() / k as f64);
                        weights.extend(std::iter::repeat(1.0 / k as f64).take(k));
                    }
                }
            }
        }
        (out, weights)
    });
    let mut out = Vec::with_capacity(stack.n() * g.out_frame_len());
    let mut weights = Vec::with_capacity(stack.n() * g.out_frame_len() * k);
    for (o, w) in per_frame {
        out.extend_from_slice(&o);
        weights.extend_from_slice(&w);
    }
    Ok(PoolForward {
        output: ActivationStack::from_raw(stack.n(), g.oh, g.ow, g.d, out),
        switches: Switches::Weights(weights),
        input_dims: stack.dims(),
        window: spec.window,
        stride: spec.stride,
    })
}

/// One score map per frame: flatten, project, score, unflatten. The maps
/// are shared by every channel of the frame.
pub fn compute_score_maps(
    stack: &ActivationStack,
    proj: &Projection,
    model: &RankingModel,
) -> Result<Vec<ScoreMap>> {
    compute_score_maps_with(Exec::default(), stack, proj, model)
}

pub fn compute_score_maps_with(
    exec: Exec,
    stack: &ActivationStack,
    proj: &Projection,
    model: &RankingModel,
) -> Result<Vec<ScoreMap>> {
    if stack.d() != proj.input_dim() {
        return Err(Error::Dimension(format!(
            "stack has {} channels, projection expects {}",
            stack.d(),
            proj.input_dim()
        )));
    }
    let projected = project(&flatten_stack(stack), proj)?;
    let scores = score_instances_with(exec, &projected, model)?;
    unflatten_scores(&scores.scores, (stack.n(), stack.h(), stack.w()))
}

/// Picks, per window, the pixel with the highest score and copies its whole
/// `d`-channel vector.
pub fn pool_multipartite(
    stack: &ActivationStack,
    spec: &PoolSpec,
    maps: &[ScoreMap],
) -> Result<PoolForward> {
    pool_multipartite_with(Exec::default(), stack, spec, maps)
}

pub fn pool_multipartite_with(
    exec: Exec,
    stack: &ActivationStack,
    spec: &PoolSpec,
    maps: &[ScoreMap],
) -> Result<PoolForward> {
    let g = Geometry::new(stack, spec)?;
    if maps.len() != stack.n() {
        return Err(Error::Dimension(format!(
            "{} score maps for {} frames",
            maps.len(),
            stack.n()
        )));
    }
    if let Some(m) = maps
        .iter()
        .find(|m| m.h != g.h || m.w != g.w || m.values.len() != g.h * g.w)
    {
        return Err(Error::Dimension(format!(
            "score map {}x{} does not match {}x{} frames",
            m.h, m.w, g.h, g.w
        )));
    }
    let frames = exec::map_indexed(exec, stack.n(), |f| {
        let src = stack.frame(f);
        let scores = &maps[f].values;
        let mut out = Vec::with_capacity(g.out_frame_len());
        let mut sw = Vec::with_capacity(g.oh * g.ow);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for p in g.window_pixels(oy, ox) {
                    if arg == usize::MAX || scores[p] > best {
                        best = scores[p];
                        arg = p;
                    }
                }
                out.extend_from_slice(&src[arg * g.d..(arg + 1) * g.d]);
                sw.push(arg);
            }
        }
        (out, sw)
    });
    Ok(assemble(&g, stack.n(), frames, spec, false))
}

/// Routes `grad_out` (laid out like `forward.output`) back to the input.
pub fn pool_backward(forward: &PoolForward, grad_out: &[f64]) -> Result<ActivationStack> {
    pool_backward_with(Exec::default(), forward, grad_out)
}

pub fn pool_backward_with(
    exec: Exec,
    forward: &PoolForward,
    grad_out: &[f64],
) -> Result<ActivationStack> {
    let (n, h, w, d) = forward.input_dims;
    let (oh, ow) = (forward.output.h(), forward.output.w());
    let (ph, pw) = forward.window;
    let (sh, sw) = forward.stride;
    let out_frame = oh * ow * d;
    if grad_out.len() != n * out_frame {
        return Err(Error::Dimension(format!(
            "upstream gradient has {} values, pooled output has {}",
            grad_out.len(),
            n * out_frame
        )));
    }
    let in_frame = h * w * d;
    let k = ph * pw;
    let mut grad_in = vec![0.0; n * in_frame];
    exec::for_each_chunk_mut(exec, &mut grad_in, in_frame, |f, gi| {
        let go = &grad_out[f * out_frame..(f + 1) * out_frame];
        let window = |oy: usize, ox: usize| {
            (0..ph).flat_map(move |dy| (0..pw).map(move |dx| (oy * sh + dy) * w + ox * sw + dx))
        };
        match &forward.switches {
            Switches::PerChannel(idx) => {
                let base = f * in_frame;
                for (j, g) in go.iter().enumerate() {
                    gi[idx[f * out_frame + j] - base] += g;
                }
            }
            Switches::Spatial(pix) => {
                for o in 0..oh * ow {
                    let p = pix[f * oh * ow + o];
                    for c in 0..d {
                        gi[p * d + c] += go[o * d + c];
                    }
                }
            }
            Switches::Uniform => {
                let share = 1.0 / k as f64;
                for oy in 0..oh {
                    for ox in 0..ow {
                        for p in window(oy, ox) {
                            for c in 0..d {
                                gi[p * d + c] += go[(oy * ow + ox) * d + c] * share;
                            }
                        }
                    }
                }
            }
            Switches::Weights(wts) => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for c in 0..d {
                            let j = (oy * ow + ox) * d + c;
                            let wj = &wts[(f * out_frame + j) * k..(f * out_frame + j + 1) * k];
                            for (t, p) in window(oy, ox).enumerate() {
                                gi[p * d + c] += go[j] * wj[t];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(ActivationStack::from_raw(n, h, w, d, grad_in))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_window(vals: &[f64]) -> ActivationStack {
        ActivationStack::new(1, 2, 2, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn max_basic_and_tie() {
        let spec = PoolSpec::square(2, Strategy::Max);
        let f = pool_max(&one_window(&[1.0, 3.0, 2.0, 0.0]), &spec).unwrap();
        assert_eq!(f.output.data(), &[3.0]);
        assert_eq!(f.switches, Switches::PerChannel(vec![1]));
        let f = pool_max(&one_window(&[2.0; 4]), &spec).unwrap();
        assert_eq!(f.output.data(), &[2.0]);
        assert_eq!(f.switches, Switches::PerChannel(vec![0]));
    }

    #[test]
    fn average_basic() {
        let spec = PoolSpec::square(2, Strategy::Average);
        let f = pool_average(&one_window(&[1.0, 3.0, 2.0, 0.0]), &spec).unwrap();
        assert_eq!(f.output.data(), &[1.5]);
        let c = ActivationStack::from_fn(2, 4, 4, 3, |_, _, _, _| 0.7);
        let f = pool_average(&c, &spec).unwrap();
        assert!(f.output.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn backward_routes() {
        let spec = PoolSpec::square(2, Strategy::Max);
        let f = pool_max(&one_window(&[1.0, 3.0, 2.0, 0.0]), &spec).unwrap();
        let g = pool_backward(&f, &[5.0]).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0, 0.0]);
        let spec = PoolSpec::square(2, Strategy::Average);
        let f = pool_average(&one_window(&[1.0, 3.0, 2.0, 0.0]), &spec).unwrap();
        let g = pool_backward(&f, &[4.0]).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
        assert!(matches!(
            pool_backward(&f, &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn stochastic_degenerate_and_test_mode() {
        let spec = PoolSpec::square(2, Strategy::Stochastic);
        for seed in 0..50 {
            let f = pool_stochastic(&one_window(&[0.0, 0.0, 5.0, 0.0]), &spec, seed, true).unwrap();
            assert_eq!(f.output.data(), &[5.0]);
        }
        let s = ActivationStack::new(1, 1, 2, 1, vec![1.0, 3.0]).unwrap();
        let spec = PoolSpec {
            window: (1, 2),
            stride: (1, 2),
            strategy: Strategy::Stochastic,
        };
        let f = pool_stochastic(&s, &spec, 0, false).unwrap();
        assert_eq!(f.output.data(), &[2.5]);
    }

    #[test]
    fn stochastic_reproducible() {
        let s = ActivationStack::from_fn(3, 4, 4, 2, |f, y, x, c| {
            ((f + y * 3 + x * 5 + c) % 7) as f64
        });
        let spec = PoolSpec::square(2, Strategy::Stochastic);
        let a = pool_stochastic_with(Exec::Sequential, &s, &spec, 42, true).unwrap();
        let b = pool_stochastic_with(Exec::Parallel, &s, &spec, 42, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multipartite_selects_shared_location() {
        // Scores [[1,3],[2,0]] pick the top-right pixel for both channels.
        let s = ActivationStack::new(
            1,
            2,
            2,
            2,
            vec![10.0, 20.0, 11.0, 21.0, 12.0, 22.0, 13.0, 23.0],
        )
        .unwrap();
        let maps = vec![ScoreMap {
            h: 2,
            w: 2,
            values: vec![1.0, 3.0, 2.0, 0.0],
        }];
        let spec = PoolSpec::square(2, Strategy::Multipartite);
        let f = pool_multipartite(&s, &spec, &maps).unwrap();
        assert_eq!(f.output.data(), &[11.0, 21.0]);
        assert_eq!(f.switches, Switches::Spatial(vec![1]));
        let g = pool_backward(&f, &[1.0, 2.0]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_scores_subsample() {
        let s = ActivationStack::from_fn(2, 4, 6, 3, |f, y, x, c| {
            (f * 1000 + y * 100 + x * 10 + c) as f64
        });
        let maps: Vec<ScoreMap> = (0..2)
            .map(|_| ScoreMap {
                h: 4,
                w: 6,
                values: vec![0.5; 24],
            })
            .collect();
        let f = pool_multipartite(&s, &PoolSpec::square(2, Strategy::Multipartite), &maps).unwrap();
        let want = ActivationStack::from_fn(2, 2, 3, 3, |fr, y, x, c| s.get(fr, 2 * y, 2 * x, c));
        assert_eq!(f.output, want);
    }

    #[test]
    fn multipartite_dimension_errors() {
        let s = ActivationStack::zeros(2, 4, 4, 1);
        let spec = PoolSpec::square(2, Strategy::Multipartite);
        let one = vec![ScoreMap {
            h: 4,
            w: 4,
            values: vec![0.0; 16],
        }];
        assert!(matches!(
            pool_multipartite(&s, &spec, &one),
            Err(Error::Dimension(_))
        ));
        let wrong = vec![
            ScoreMap {
                h: 2,
                w: 8,
                values: vec![0.0; 16]
            };
            2
        ];
        assert!(matches!(
            pool_multipartite(&s, &spec, &wrong),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn tiling_is_checked() {
        let s = ActivationStack::zeros(1, 5, 4, 1);
        assert!(matches!(
            pool_max(&s, &PoolSpec::square(2, Strategy::Max)),
            Err(Error::Dimension(_))
        ));
        let spec = PoolSpec {
            window: (3, 2),
            stride: (2, 2),
            strategy: Strategy::Max,
        };
        assert_eq!(pool_max(&s, &spec).unwrap().output.dims(), (1, 2, 2, 1));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("median".parse::<Strategy>().is_err());
    }
}
