//! The energy-mask layer.
//!
//! A `C×H×W` feature map is cut into `N` tokens of width `D = C·d²`. Each
//! token gets a unary score `z = w·p̂ + b` from a learned noise template `w`,
//! a keep probability `m = σ(−z)`, and a retention energy
//!
//! ```text
//! E = λ_unary·softplus(z) + λ_pair·softplus(Σ_{j∈N(i)} p̂_i·p̂_j)
//! ```
//!
//! where `N(i)` is the 8-connected neighbourhood on the token grid. The
//! layer output scales every (unnormalized) token by its `m`. Training adds
//! the expected energy `mean(m·E)` to the task loss; at inference the
//! pairwise term is skipped since gating only reads `z`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor, TokenGeometry};

/// Stabilizer added to token norms before normalizing.
pub const NORM_EPS: f64 = 1e-8;

/// Default energy weights for both terms.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Whether the pairwise energy is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Unary-only gating; pairwise energies are not computed.
    Infer,
}

/// Moore (8-connected) neighbourhoods on a token grid, truncated at the border.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    grid_h: usize,
    grid_w: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborTable {
    pub fn new(grid_h: usize, grid_w: usize) -> Self {
        let mut neighbors = Vec::with_capacity(grid_h * grid_w);
        for y in 0..grid_h as isize {
            for x in 0..grid_w as isize {
                let mut list = Vec::with_capacity(8);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (ny, nx) = (y + dy, x + dx);
                        if (dy, dx) != (0, 0) && ny >= 0 && nx >= 0 && ny < grid_h as isize && nx < grid_w as isize {
                            list.push(ny as usize * grid_w + nx as usize);
                        }
                    }
                }
                neighbors.push(list);
            }
        }
        NeighborTable { grid_h, grid_w, neighbors }
    }

    pub fn for_geometry(geom: &TokenGeometry) -> Self {
        Self::new(geom.grid_h(), geom.grid_w())
    }

    pub fn tokens(&self) -> usize {
        self.neighbors.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    /// Neighbours of `token`, ascending.
    pub fn neighbors(&self, token: usize) -> &[usize] {
        &self.neighbors[token]
    }
}

fn check_table(tokens: &Tensor, table: &NeighborTable, op: &'static str) -> Result<usize> {
    match *tokens.shape() {
        [n, d] if n == table.tokens() => Ok(d),
        _ => Err(shape_err(op, format!("tokens {:?} on a {:?} grid", tokens.shape(), table.grid()))),
    }
}

/// `E_pair[i] = Σ_{j∈N(i)} p̂_i·p̂_j`.
pub fn neighbor_cosine_sum(p_hat: &Tensor, table: &NeighborTable) -> Result<Tensor> {
    let d = check_table(p_hat, table, "neighbor_cosine_sum")?;
    let rows = p_hat.data();
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let out = (0..table.tokens())
        .map(|i| table.neighbors(i).iter().fold(0.0, |acc, &j| acc + tensor::elementwise_dot(row(i), row(j))))
        .collect();
    Tensor::new(&[table.tokens()], out)?.checked("neighbor_cosine_sum")
}

/// Vector-Jacobian product of [`neighbor_cosine_sum`]. Each pair term feeds
/// both endpoints, and the table is symmetric, so
/// `∂L/∂p̂_i = Σ_{j∈N(i)} (g_i + g_j)·p̂_j`.
pub fn neighbor_cosine_sum_backward(p_hat: &Tensor, grad_out: &Tensor, table: &NeighborTable) -> Result<Tensor> {
    let d = check_table(p_hat, table, "neighbor_cosine_sum_backward")?;
    if grad_out.len() != table.tokens() {
        return Err(shape_err("neighbor_cosine_sum_backward", format!("upstream gradient {:?}", grad_out.shape())));
    }
    let rows = p_hat.data();
    let g = grad_out.data();
    let mut out = vec![0.0; rows.len()];
    for (i, acc) in out.chunks_exact_mut(d).enumerate() {
        for &j in table.neighbors(i) {
            let coef = g[i] + g[j];
            acc.iter_mut().zip(&rows[j * d..(j + 1) * d]).for_each(|(a, &p)| *a += coef * p);
        }
    }
    Tensor::new(p_hat.shape(), out)?.checked("neighbor_cosine_sum_backward")
}

/// Trainable template and bias plus the fixed energy weights and patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLayerParams {
    /// Noise template, length `D`.
    pub w: Tensor,
    /// Shared bias added to every token's score.
    pub b: f64,
    pub lambda_unary: f64,
    pub lambda_pair: f64,
    pub patch: usize,
}

impl MaskLayerParams {
    pub fn new(w: Tensor, b: f64, lambda_unary: f64, lambda_pair: f64, patch: usize) -> Result<Self> {
        if w.rank() != 1 {
            return Err(shape_err("MaskLayerParams", format!("template must be a vector, got {:?}", w.shape())));
        }
        if !(lambda_unary >= 0.0 && lambda_pair >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "energy weights must be non-negative, got {lambda_unary}, {lambda_pair}"
            )));
        }
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        Ok(MaskLayerParams { w, b, lambda_unary, lambda_pair, patch })
    }

    /// `w ~ U(±1e-3)`, `b = 0`: every token starts near `m = 0.5`.
    pub fn init<R: Rng + ?Sized>(
        token_dim: usize,
        lambda_unary: f64,
        lambda_pair: f64,
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = (0..token_dim).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        Self::new(Tensor::from_vec(w)?, 0.0, lambda_unary, lambda_pair, patch)
    }

    pub fn token_dim(&self) -> usize {
        self.w.len()
    }

    /// The full variant runs only when the pairwise weight is positive.
    pub fn uses_pairwise(&self) -> bool {
        self.lambda_pair > 0.0
    }

    fn check_geometry(&self, geom: &TokenGeometry) -> Result<()> {
        if geom.token_dim() != self.token_dim() {
            return Err(shape_err(
                "energy_mask",
                format!("template has length {}, tokens have width {}", self.token_dim(), geom.token_dim()),
            ));
        }
        Ok(())
    }
}

/// Per-token quantities from one pass of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDiagnostics {
    pub geometry: TokenGeometry,
    /// Unary scores `z`.
    pub z: Vec<f64>,
    /// Keep probabilities `σ(−z)`.
    pub m: Vec<f64>,
    pub e_unary: Vec<f64>,
    /// Zero in inference mode and for the unary variant.
    pub e_pair: Vec<f64>,
    pub energy: Vec<f64>,
}

impl EnergyDiagnostics {
    pub fn tokens(&self) -> usize {
        self.z.len()
    }

    pub fn mean_mask(&self) -> f64 {
        self.m.iter().sum::<f64>() / self.m.len() as f64
    }

    pub fn reg_loss(&self) -> f64 {
        reg_loss_slices(&self.m, &self.energy)
    }
}

/// Raw tokens, their normalized copies and the tiling they came from.
#[derive(Debug, Clone)]
pub struct Tokens {
    pub raw: Tensor,
    pub normalized: Tensor,
    pub geometry: TokenGeometry,
}

pub fn tokenize(x: &Tensor, d: usize) -> Result<Tokens> {
    let geometry = TokenGeometry::new(x.feature_shape()?, d)?;
    let raw = tensor::unfold(x, d)?;
    let normalized = tensor::l2norm_rows(&raw, NORM_EPS)?;
    Ok(Tokens { raw, normalized, geometry })
}

/// `z_i = w·p̂_i + b`.
pub fn unary_scores(p_hat: &Tensor, params: &MaskLayerParams) -> Result<Tensor> {
    let proj = tensor::matvec(p_hat, &params.w)?;
    let b = params.b;
    Tensor::new(proj.shape(), proj.data().iter().map(|&v| v + b).collect())?.checked("unary_scores")
}

/// Keep probabilities `σ(−z)`.
pub fn gate(z: &Tensor) -> Result<Tensor> {
    tensor::sigmoid(&tensor::scale(z, -1.0)?)
}

/// Energy terms. `pair_sums` is `None` when the pairwise branch is skipped.
#[derive(Debug, Clone)]
pub struct Energies {
    pub unary: Tensor,
    pub pair: Tensor,
    pub total: Tensor,
}

pub fn energies(z: &Tensor, pair_sums: Option<&Tensor>, params: &MaskLayerParams) -> Result<Energies> {
    let unary = tensor::scale(&tensor::softplus(z)?, params.lambda_unary)?;
    match pair_sums {
        Some(sums) => {
            let pair = tensor::scale(&tensor::softplus(sums)?, params.lambda_pair)?;
            let total = tensor::add(&unary, &pair)?;
            Ok(Energies { unary, pair, total })
        }
        None => Ok(Energies { pair: Tensor::zeros(z.shape()), total: unary.clone(), unary }),
    }
}

/// Applies the layer to one feature map.
pub fn forward(x: &Tensor, params: &MaskLayerParams, mode: Mode) -> Result<(Tensor, EnergyDiagnostics)> {
    let toks = tokenize(x, params.patch)?;
    params.check_geometry(&toks.geometry)?;
    let z = unary_scores(&toks.normalized, params)?;
    let m = gate(&z)?;
    let pair_sums = if mode == Mode::Train && params.uses_pairwise() {
        let table = NeighborTable::for_geometry(&toks.geometry);
        Some(neighbor_cosine_sum(&toks.normalized, &table)?)
    } else {
        None
    };
    let e = energies(&z, pair_sums.as_ref(), params)?;
    let masked = tensor::mul_rows(&toks.raw, &m)?;
    let x_tilde = tensor::fold(&masked, &toks.geometry)?;
    let diag = EnergyDiagnostics {
        geometry: toks.geometry,
        z: z.into_data(),
        m: m.into_data(),
        e_unary: e.unary.into_data(),
        e_pair: e.pair.into_data(),
        energy: e.total.into_data(),
    };
    Ok((x_tilde, diag))
}

/// Expected energy of the retained set, `mean(m·E)`.
pub fn reg_loss(m: &Tensor, energy: &Tensor) -> Result<f64> {
    tensor::mean(&tensor::mul(m, energy)?)
}

fn reg_loss_slices(m: &[f64], e: &[f64]) -> f64 {
    m.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / m.len() as f64
}

/// Tape handles for one recorded pass of the layer.
#[derive(Debug, Clone, Copy)]
pub struct RecordedMask {
    pub output: Var,
    pub z: Var,
    pub m: Var,
    pub energy: Var,
    pub reg: Var,
}

/// Records [`forward`] on a tape. `w` must hold the template and `b` a
/// one-element tensor; the fixed weights and patch size come from `params`.
/// Produces bitwise the same values as [`forward`].
pub fn record(tape: &mut Tape, x: Var, w: Var, b: Var, params: &MaskLayerParams, mode: Mode) -> Result<RecordedMask> {
    let geometry = TokenGeometry::new(tape.value(x).feature_shape()?, params.patch)?;
    params.check_geometry(&geometry)?;
    let raw = tape.unfold(x, params.patch)?;
    let p_hat = tape.l2norm_rows(raw, NORM_EPS)?;
    let proj = tape.matvec(p_hat, w)?;
    let z = tape.add_scalar(proj, b)?;
    let neg = tape.scale(z, -1.0)?;
    let m = tape.sigmoid(neg)?;
    let sp = tape.softplus(z)?;
    let unary = tape.scale(sp, params.lambda_unary)?;
    let energy = if mode == Mode::Train && params.uses_pairwise() {
        let table = NeighborTable::for_geometry(&geometry);
        let sums = tape.neighbor_cosine_sum(p_hat, &table)?;
        let sp_pair = tape.softplus(sums)?;
        let pair = tape.scale(sp_pair, params.lambda_pair)?;
        tape.add(unary, pair)?
    } else {
        unary
    };
    let weighted = tape.mul(m, energy)?;
    let reg = tape.mean(weighted)?;
    let masked = tape.mul_rows(raw, m)?;
    let output = tape.fold(masked, geometry)?;
    Ok(RecordedMask { output, z, m, energy, reg })
}

/// Bilinear upsampling of a `grid_h×grid_w` mask to `out_h×out_w`, sampling
/// at pixel centres and clamping at the border.
pub fn upsample_bilinear(values: &[f64], grid_h: usize, grid_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if values.len() != grid_h * grid_w || grid_h == 0 || grid_w == 0 {
        return Err(shape_err("upsample_bilinear", format!("{} values for a {grid_h}x{grid_w} grid", values.len())));
    }
    let coord = |o: usize, out: usize, grid: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * grid as f64 / out as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = libm::floor(src) as usize;
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, grid_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, grid_w);
            let top = values[y0 * grid_w + x0] * (1.0 - fx) + values[y0 * grid_w + x1] * fx;
            let bottom = values[y1 * grid_w + x0] * (1.0 - fx) + values[y1 * grid_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureShape;

    fn params(w: Vec<f64>, b: f64, lu: f64, lp: f64, d: usize) -> MaskLayerParams {
        MaskLayerParams::new(Tensor::from_vec(w).unwrap(), b, lu, lp, d).unwrap()
    }

    #[test]
    fn neighbor_counts_on_three_by_three() {
        let t = NeighborTable::new(3, 3);
        let counts: Vec<usize> = (0..9).map(|i| t.neighbors(i).len()).collect();
        assert_eq!(counts, vec![3, 5, 3, 5, 8, 5, 3, 5, 3]);
    }

    #[test]
    fn neighbor_table_is_symmetric() {
        let t = NeighborTable::new(4, 6);
        for i in 0..t.tokens() {
            for &j in t.neighbors(i) {
                assert!(t.neighbors(j).contains(&i));
            }
        }
    }

    #[test]
    fn identical_tokens_count_neighbours() {
        let row = [0.6, 0.8];
        let p = Tensor::new(&[9, 2], row.iter().copied().cycle().take(18).collect()).unwrap();
        let e = neighbor_cosine_sum(&p, &NeighborTable::new(3, 3)).unwrap();
        // 0.6² + 0.8² rounds to exactly 1 in f64
        assert_eq!(e.data(), &[3.0, 5.0, 3.0, 5.0, 8.0, 5.0, 3.0, 5.0, 3.0]);
    }

    #[test]
    fn orthogonal_tokens_have_no_pairwise_sum() {
        let mut data = vec![0.0; 9 * 9];
        for i in 0..9 {
            data[i * 9 + i] = 1.0;
        }
        let e = neighbor_cosine_sum(&Tensor::new(&[9, 9], data).unwrap(), &NeighborTable::new(3, 3)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_template_gives_zero_scores() {
        let x = Tensor::new(&[2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let toks = tokenize(&x, 1).unwrap();
        let z = unary_scores(&toks.normalized, &params(vec![0.0; 2], 0.0, 1e-3, 1e-3, 1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_map_normalizes_to_zero() {
        let toks = tokenize(&Tensor::zeros(&[3, 4, 4]), 2).unwrap();
        assert!(toks.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn template_mismatch_is_an_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(forward(&x, &params(vec![0.0; 3], 0.0, 0.0, 0.0, 2), Mode::Train).is_err());
        assert!(forward(&x, &params(vec![0.0; 8], 0.0, 0.0, 0.0, 3), Mode::Train).is_err());
    }

    #[test]
    fn neutral_energy_value() {
        let z = Tensor::zeros(&[4]);
        let e = energies(&z, Some(&Tensor::zeros(&[4])), &params(vec![0.0], 0.0, 1e-3, 1e-3, 1)).unwrap();
        for &v in e.total.data() {
            assert!((v - 2e-3 * core::f64::consts::LN_2).abs() < 1e-18);
        }
    }

    #[test]
    fn very_negative_score_keeps_tiny_positive_energy() {
        let z = Tensor::full(&[1], -40.0);
        let e = energies(&z, None, &params(vec![0.0], 0.0, 1e-3, 0.0, 1)).unwrap();
        let v = e.unary.data()[0];
        assert!(v > 0.0 && v.is_finite());
        assert!((v - 1e-3 * libm::exp(-40.0)).abs() < 1e-35);
    }

    #[test]
    fn gate_values() {
        let z = Tensor::new(&[3], vec![0.0, libm::log(3.0), 50.0]).unwrap();
        let m = gate(&z).unwrap();
        assert_eq!(m.data()[0], 0.5);
        assert!((m.data()[1] - 0.25).abs() < 1e-15);
        assert!(m.data()[2] < 1e-20);
    }

    #[test]
    fn neutral_layer_halves_the_map() {
        let x = Tensor::new(&[2, 4, 4], (0..32).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let (y, diag) = forward(&x, &params(vec![0.0; 8], 0.0, 1e-3, 1e-3, 2), Mode::Train).unwrap();
        let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
        assert_eq!(y.data(), half.as_slice());
        assert!(diag.m.iter().all(|&m| m == 0.5));
    }

    #[test]
    fn open_gate_passes_the_map_through() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
        let (y, _) = forward(&x, &params(vec![0.0; 4], -40.0, 1e-3, 1e-3, 2), Mode::Infer).unwrap();
        let inf = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-15 * inf);
        }
    }

    #[test]
    fn infer_mode_reports_zero_pairwise_energy() {
        let x = Tensor::new(&[1, 4, 4], (0..16).map(|i| 1.0 + i as f64).collect()).unwrap();
        let p = params(vec![0.3; 4], 0.1, 1e-3, 1e-3, 2);
        let (yt, dt) = forward(&x, &p, Mode::Train).unwrap();
        let (yi, di) = forward(&x, &p, Mode::Infer).unwrap();
        assert_eq!(yt, yi);
        assert_eq!(dt.m, di.m);
        assert!(di.e_pair.iter().all(|&v| v == 0.0));
        assert!(dt.e_pair.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn reg_loss_of_constant_energy() {
        let m = Tensor::full(&[5], 0.5);
        assert_eq!(reg_loss(&m, &Tensor::zeros(&[5])).unwrap(), 0.0);
        assert!((reg_loss(&m, &Tensor::full(&[5], 0.3)).unwrap() - 0.15).abs() < 1e-16);
    }

    #[test]
    fn upsample_constant_and_shape() {
        let up = upsample_bilinear(&[0.25; 4], 2, 2, 8, 8).unwrap();
        assert_eq!(up.len(), 64);
        assert!(up.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ramp = upsample_bilinear(&[0.0, 1.0], 1, 2, 1, 4).unwrap();
        assert_eq!(ramp, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn geometry_of_diagnostics() {
        let x = Tensor::zeros(&[3, 6, 4]);
        let (_, d) = forward(&x, &params(vec![0.0; 12], 0.0, 1e-3, 0.0, 2), Mode::Train).unwrap();
        assert_eq!(d.geometry, TokenGeometry::new(FeatureShape::new(3, 6, 4), 2).unwrap());
        assert_eq!(d.tokens(), 6);
    }
}
