//! Two-point-per-modality toy model on the unit circle.
//!
//! Four embeddings — two per modality — live on the unit circle and are
//! optimized *directly* (no encoder) under the symmetric contrastive loss.
//! Because the whole configuration is four angles, the global minimum can be
//! found by exhaustive grid search, which makes this a clean laboratory for
//! one question: when can the loss itself prefer a modality gap?
//!
//! With perfectly matched pairs the optimum aligns each pair and pushes the
//! two pairs to antipodes. Adding a single miscaptioning mismatch to the pair
//! multiset moves the global optimum to a configuration where matched pairs
//! no longer coincide — a gap that no amount of optimization removes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A multiset of (x-point, y-point) index pairs over two points per modality.
///
/// Each listed pair is one dataset entry for the contrastive loss; listing a
/// pair twice doubles its weight and contributes an extra negative to every
/// other entry. Indices are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyPairMultiset {
    pairs: Vec<(usize, usize)>,
}

impl ToyPairMultiset {
    /// Validate and build a multiset from raw index pairs.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "toy pair multiset must contain at least one pair".into(),
            ));
        }
        for &(xi, yi) in &pairs {
            if xi >= 2 || yi >= 2 {
                return Err(Error::InvalidArgument(format!(
                    "toy pair index ({xi}, {yi}) out of range; only two points per modality"
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// Perfect matching: each x-point paired with its own y-point once.
    pub fn perfect() -> Self {
        Self {
            pairs: vec![(0, 0), (1, 1)],
        }
    }

    /// Matching with a miscaptioning mismatch: both true matches listed
    /// twice, plus the mismatched pair (x1, y2) and a third copy of
    /// (x2, y2). The duplicated matches keep the trivial "all points
    /// collapsed" configuration from being globally optimal.
    pub fn mismatch() -> Self {
        Self {
            pairs: vec![(0, 0), (0, 0), (1, 1), (1, 1), (0, 1), (1, 1)],
        }
    }

    /// Sensitivity variant of [`mismatch`](Self::mismatch) that replaces the
    /// third (x2, y2) copy with (x2, y1), so each modality contributes one
    /// crossed pair.
    pub fn mismatch_variant() -> Self {
        Self {
            pairs: vec![(0, 0), (0, 0), (1, 1), (1, 1), (0, 1), (1, 0)],
        }
    }

    /// The entries, in listed order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Which pair multiset the grid search optimizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToySetting {
    /// `{(x1,y1), (x2,y2)}`
    Perfect,
    /// The six-entry multiset with a miscaptioning mismatch.
    Mismatch,
    /// Caller-supplied raw index pairs.
    Custom(Vec<(usize, usize)>),
}

impl ToySetting {
    /// Materialize the multiset this setting describes.
    pub fn multiset(&self) -> Result<ToyPairMultiset> {
        match self {
            ToySetting::Perfect => Ok(ToyPairMultiset::perfect()),
            ToySetting::Mismatch => Ok(ToyPairMultiset::mismatch()),
            ToySetting::Custom(pairs) => ToyPairMultiset::new(pairs.clone()),
        }
    }
}

/// Grid-search configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Angular step of the search grid, in degrees. Must divide 360.
    pub resolution_degrees: u32,
    /// Softmax temperature of the contrastive loss.
    pub temperature: f64,
    /// Pair multiset to optimize.
    pub setting: ToySetting,
    /// Pin x1 to 0 degrees. The loss is rotation invariant, so this only
    /// removes a redundant search dimension (60x fewer points at 6 degrees).
    pub fix_first_point: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            resolution_degrees: 6,
            temperature: 1.0,
            setting: ToySetting::Perfect,
            fix_first_point: true,
        }
    }
}

impl ToyConfig {
    /// Check the documented invariants.
    pub fn validate(&self) -> Result<()> {
        if self.resolution_degrees == 0 || 360 % self.resolution_degrees != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution must divide 360 degrees, got {}",
                self.resolution_degrees
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        self.setting.multiset().map(drop)
    }
}

/// The four point positions, as angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyAngles {
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
}

impl ToyAngles {
    /// Order used everywhere an angle array appears: `[x1, x2, y1, y2]`.
    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.x2, self.y1, self.y2]
    }

    /// Inverse of [`to_array`](Self::to_array).
    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x1: a[0],
            x2: a[1],
            y1: a[2],
            y2: a[3],
        }
    }
}

/// Result of a grid search: the first (lexicographically smallest) grid
/// point attaining the minimal loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyOptimum {
    /// Minimizing angles as found on the grid.
    pub angles: ToyAngles,
    /// The same configuration mapped to canonical form (see [`canonicalize`]).
    pub canonical_angles: ToyAngles,
    /// Loss at the optimum.
    pub loss: f64,
    /// Mean matched-pair cosine dissimilarity at the optimum; zero means the
    /// matched pairs coincide, positive means the optimum keeps a gap.
    pub matched_gap: f64,
}

/// Symmetric contrastive loss of a four-point configuration.
///
/// Each multiset entry is one dataset entry. Per entry, the x-to-y direction
/// scores the entry's own pair against the y-points of all *other* entries
/// as negatives; the y-to-x direction mirrors it. The two directions are
/// averaged, then the mean over entries is returned.
pub fn toy_loss(angles: ToyAngles, multiset: &ToyPairMultiset, temperature: f64) -> f64 {
    let x = [angles.x1.to_radians(), angles.x2.to_radians()];
    let y = [angles.y1.to_radians(), angles.y2.to_radians()];
    let mut expw = [[0.0f64; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            // Unit-circle dot product is the cosine of the angle difference.
            expw[i][j] = ((x[i] - y[j]).cos() / temperature).exp();
        }
    }
    loss_from_exp(&expw, multiset)
}

/// Shared core of the direct and table-driven loss paths.
/// `expw[i][j]` must hold `exp(cos(x_i - y_j) / temperature)`.
fn loss_from_exp(expw: &[[f64; 2]; 2], multiset: &ToyPairMultiset) -> f64 {
    let entries = multiset.pairs();
    let mut total = 0.0;
    for (e, &(xi, yj)) in entries.iter().enumerate() {
        let pos = expw[xi][yj];
        let mut den_xy = pos;
        let mut den_yx = pos;
        for (o, &(xo, yo)) in entries.iter().enumerate() {
            if o == e {
                continue;
            }
            den_xy += expw[xi][yo];
            den_yx += expw[xo][yj];
        }
        total += 0.5 * ((den_xy / pos).ln() + (den_yx / pos).ln());
    }
    total / entries.len() as f64
}

/// Map a configuration to canonical form: rotate so `x1 = 0`, then reflect
/// (negate all angles) if `y1 > 180`, collapsing the rotation/reflection
/// symmetry of the loss. All angles are reduced to `[0, 360)`.
pub fn canonicalize(angles: ToyAngles) -> ToyAngles {
    let rot = angles.x1;
    let mut a = angles.to_array().map(|v| (v - rot).rem_euclid(360.0));
    if a[2] > 180.0 {
        a = a.map(|v| (-v).rem_euclid(360.0));
    }
    ToyAngles::from_array(a)
}

/// Reflect a configuration (negate all angles, reduced to `[0, 360)`).
pub fn reflect(angles: ToyAngles) -> ToyAngles {
    ToyAngles::from_array(angles.to_array().map(|v| (-v).rem_euclid(360.0)))
}

/// Do two configurations coincide up to global rotation and reflection?
///
/// [`canonicalize`] alone is ambiguous when `y1` lands exactly on 0 or 180
/// (both representatives survive the `y1 > 180` test), so both
/// representatives of `a`'s orbit are checked against `b`'s canonical form.
pub fn same_orbit(a: ToyAngles, b: ToyAngles, tol_degrees: f64) -> bool {
    let cb = canonicalize(b);
    angles_close(canonicalize(a), cb, tol_degrees)
        || angles_close(canonicalize(reflect(a)), cb, tol_degrees)
}

fn angles_close(a: ToyAngles, b: ToyAngles, tol: f64) -> bool {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .all(|(&p, &q)| circular_distance(p, q) <= tol)
}

/// Shortest angular distance between two angles in degrees, in `[0, 180]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Mean matched-pair cosine dissimilarity `(1 - cos(x_i - y_i)) / 2` of the
/// index-matched pairs (x1,y1) and (x2,y2). Zero when each pair coincides.
pub fn matched_gap(angles: ToyAngles) -> f64 {
    let d1 = 0.5 * (1.0 - (angles.x1.to_radians() - angles.y1.to_radians()).cos());
    let d2 = 0.5 * (1.0 - (angles.x2.to_radians() - angles.y2.to_radians()).cos());
    0.5 * (d1 + d2)
}

/// Exhaustively minimize the loss over the angle grid.
///
/// Evaluates every grid point (x1 pinned to 0 when `fix_first_point`) and
/// returns the minimum; ties resolve to the lexicographically smallest
/// `[x1, x2, y1, y2]`. Work is split over x2 slices and reduced in slice
/// order, so the result is deterministic regardless of thread count.
pub fn grid_search(cfg: &ToyConfig) -> Result<ToyOptimum> {
    cfg.validate()?;
    let multiset = cfg.setting.multiset()?;
    let n = (360 / cfg.resolution_degrees) as usize;
    let step = cfg.resolution_degrees as f64;

    // exp(cos(k * step) / temperature) for every possible angle difference;
    // the inner loop then only gathers and sums.
    let expw: Vec<f64> = (0..n)
        .map(|k| ((k as f64 * step).to_radians().cos() / cfg.temperature).exp())
        .collect();

    let x1_count = if cfg.fix_first_point { 1 } else { n };
    let mut best = (f64::INFINITY, [0usize; 4]);
    for x1 in 0..x1_count {
        let candidate = scan_x1(x1, n, &expw, &multiset);
        if candidate.0 < best.0 {
            best = candidate;
        }
    }

    let (loss, idx) = best;
    let canon = canonical_indices(idx, n);
    let angles = ToyAngles::from_array(idx.map(|k| k as f64 * step));
    Ok(ToyOptimum {
        angles,
        canonical_angles: ToyAngles::from_array(canon.map(|k| k as f64 * step)),
        loss,
        matched_gap: matched_gap(angles),
    })
}

/// Scan all (x2, y1, y2) for one x1, splitting the x2 range over threads.
fn scan_x1(x1: usize, n: usize, expw: &[f64], multiset: &ToyPairMultiset) -> (f64, [usize; 4]) {
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(n);
    if workers <= 1 {
        return scan_x2_range(x1, 0..n, n, expw, multiset);
    }
    let chunk = n.div_ceil(workers);
    let mut partials = Vec::with_capacity(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(n);
                let hi = ((w + 1) * chunk).min(n);
                s.spawn(move || scan_x2_range(x1, lo..hi, n, expw, multiset))
            })
            .collect();
        for handle in handles {
            partials.push(handle.join().expect("grid-search worker panicked"));
        }
    });
    // Slice-ordered reduction; strict < keeps the earliest slice on ties,
    // preserving the lexicographic tie-break.
    partials
        .into_iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("at least one worker")
}

fn scan_x2_range(
    x1: usize,
    x2s: std::ops::Range<usize>,
    n: usize,
    expw: &[f64],
    multiset: &ToyPairMultiset,
) -> (f64, [usize; 4]) {
    let mut best = (f64::INFINITY, [0usize; 4]);
    for x2 in x2s {
        for y1 in 0..n {
            let e00 = expw[(x1 + n - y1) % n];
            let e10 = expw[(x2 + n - y1) % n];
            for y2 in 0..n {
                let expw_pt = [
                    [e00, expw[(x1 + n - y2) % n]],
                    [e10, expw[(x2 + n - y2) % n]],
                ];
                let loss = loss_from_exp(&expw_pt, multiset);
                if loss < best.0 {
                    best = (loss, [x1, x2, y1, y2]);
                }
            }
        }
    }
    best
}

/// Integer-grid version of [`canonicalize`]: exact modular arithmetic on
/// grid indices, so canonical angles of grid optima carry no rounding.
fn canonical_indices(idx: [usize; 4], n: usize) -> [usize; 4] {
    let rot = idx[0];
    let mut c = idx.map(|a| (a + n - rot) % n);
    if 2 * c[2] > n {
        c = c.map(|a| (n - a) % n);
    }
    c
}

/// A known grid optimum of the mismatched multiset at 6-degree resolution
/// (up to rotation/reflection). The temperature sweep records which
/// temperature, if any, reproduces it.
pub const REFERENCE_MISMATCH_ANGLES: ToyAngles = ToyAngles {
    x1: 0.0,
    x2: 42.0,
    y1: 276.0,
    y2: 126.0,
};

/// Temperatures swept by [`temperature_sweep`] when none are given.
pub const SWEEP_TEMPERATURES: [f64; 3] = [0.07, 0.5, 1.0];

/// One row of a temperature sweep over the mismatched setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureSweepEntry {
    pub temperature: f64,
    pub optimum: ToyOptimum,
    /// Whether the found optimum matches [`REFERENCE_MISMATCH_ANGLES`] up to
    /// rotation/reflection within one grid step.
    pub reproduces_reference: bool,
}

/// Run the mismatched-setting grid search at several temperatures and record
/// which, if any, lands on the reference optimum.
pub fn temperature_sweep(
    resolution_degrees: u32,
    temperatures: &[f64],
    variant: bool,
) -> Result<Vec<TemperatureSweepEntry>> {
    let mut out = Vec::with_capacity(temperatures.len());
    for &temperature in temperatures {
        let cfg = ToyConfig {
            resolution_degrees,
            temperature,
            setting: if variant {
                ToySetting::Custom(ToyPairMultiset::mismatch_variant().pairs().to_vec())
            } else {
                ToySetting::Mismatch
            },
            fix_first_point: true,
        };
        let optimum = grid_search(&cfg)?;
        let reproduces_reference = same_orbit(
            optimum.angles,
            REFERENCE_MISMATCH_ANGLES,
            resolution_degrees as f64,
        );
        out.push(TemperatureSweepEntry {
            temperature,
            optimum,
            reproduces_reference,
        });
    }
    Ok(out)
}
