//! Capture-probability model, cell probabilities, estimating functions and
//! dataset summaries.
//!
//! Each individual ever captured contributes a capture count `d` in `1..=K`.
//! Its covariate vector `z` (intercept first) is either fully observed or
//! missing; in the extended family a binary covariate `x` is observed for
//! everyone. Incomplete individuals enter the likelihood only through the
//! cell counts of [`CellCounts`].

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::logistic;

/// Largest supported number of capture occasions.
pub const MAX_OCCASIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Number of occasions on which the individual was captured.
    pub captures: usize,
    /// Covariate vector with the intercept stored explicitly; `None` when the
    /// covariates are missing.
    pub covariates: Option<Vec<f64>>,
    /// Always-observed binary covariate (extended family only).
    pub always_observed: Option<u8>,
}

impl Record {
    pub fn complete(captures: usize, covariates: Vec<f64>) -> Self {
        Record { captures, covariates: Some(covariates), always_observed: None }
    }

    pub fn missing(captures: usize) -> Self {
        Record { captures, covariates: None, always_observed: None }
    }

    pub fn with_always_observed(mut self, x: u8) -> Self {
        self.always_observed = Some(x);
        self
    }

    pub fn is_complete(&self) -> bool {
        self.covariates.is_some()
    }
}

/// Individuals captured at least once in a closed-population experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset")]
pub struct CaptureDataset {
    occasions: usize,
    dim: usize,
    records: Vec<Record>,
}

#[derive(Deserialize)]
struct RawDataset {
    occasions: usize,
    records: Vec<Record>,
}

impl TryFrom<RawDataset> for CaptureDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        CaptureDataset::new(raw.occasions, raw.records)
    }
}

impl CaptureDataset {
    pub fn new(occasions: usize, records: Vec<Record>) -> Result<Self> {
        if occasions == 0 || occasions > MAX_OCCASIONS {
            return Err(Error::InvalidData(format!(
                "number of capture occasions must be in 1..={MAX_OCCASIONS}, got {occasions}"
            )));
        }
        let mut dim = None;
        for (i, r) in records.iter().enumerate() {
            if r.captures == 0 || r.captures > occasions {
                return Err(Error::InvalidData(format!(
                    "record {i}: capture count {} outside 1..={occasions}",
                    r.captures
                )));
            }
            if let Some(x) = r.always_observed {
                if x > 1 {
                    return Err(Error::InvalidData(format!(
                        "record {i}: always-observed covariate must be 0 or 1, got {x}"
                    )));
                }
            }
            if let Some(z) = &r.covariates {
                if z.first() != Some(&1.0) {
                    return Err(Error::InvalidData(format!(
                        "record {i}: first covariate component must be the intercept 1"
                    )));
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidData(format!("record {i}: non-finite covariate")));
                }
                match dim {
                    None => dim = Some(z.len()),
                    Some(p) if p != z.len() => {
                        return Err(Error::DimensionMismatch { expected: p, got: z.len() })
                    }
                    _ => {}
                }
            }
        }
        Ok(CaptureDataset { occasions, dim: dim.unwrap_or(0), records })
    }

    pub fn occasions(&self) -> usize {
        self.occasions
    }

    /// Covariate dimension `p` (0 when no record is complete).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn m(&self) -> usize {
        self.records.iter().filter(|r| r.is_complete()).count()
    }

    pub fn complete(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.is_complete())
    }

    pub fn incomplete(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.is_complete())
    }

    /// True when every record carries the always-observed covariate.
    pub fn has_always_observed(&self) -> bool {
        self.records.iter().all(|r| r.always_observed.is_some())
    }

    /// The dataset restricted to completely observed individuals.
    pub fn complete_cases(&self) -> CaptureDataset {
        CaptureDataset {
            occasions: self.occasions,
            dim: self.dim,
            records: self.complete().cloned().collect(),
        }
    }

    /// Applies `f` to every observed covariate vector. The result is
    /// re-validated, so `f` must keep the intercept.
    pub fn map_covariates(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<CaptureDataset> {
        let records = self
            .records
            .iter()
            .map(|r| Record {
                captures: r.captures,
                covariates: r.covariates.as_deref().map(&mut f),
                always_observed: r.always_observed,
            })
            .collect();
        CaptureDataset::new(self.occasions, records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// The whole covariate vector is subject to missingness.
    Base,
    /// One binary covariate is observed for every individual.
    Extended,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Base => write!(f, "base"),
            Family::Extended => write!(f, "extended"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Family::Base),
            "extended" => Ok(Family::Extended),
            other => Err(Error::InvalidData(format!("unknown model family `{other}`"))),
        }
    }
}

/// One component of the estimating-function vector, equivalently one
/// component of `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Cell {
    /// Never captured: `pr(D* = 0)`.
    Zero,
    /// Base family: `pr(D* = k)`.
    Count { k: usize },
    /// Extended family: `pr(X* = j, D* = k)`.
    Joint { j: u8, k: usize },
}

impl Cell {
    pub fn captures(&self) -> usize {
        match *self {
            Cell::Zero => 0,
            Cell::Count { k } | Cell::Joint { k, .. } => k,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Cell::Zero => "gamma_0".to_string(),
            Cell::Count { k } => format!("gamma_{k}"),
            Cell::Joint { j, k } => format!("gamma_{j}{k}"),
        }
    }
}

/// Binomial coefficients `C(K, k)`, evaluated once through log-gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct Binomials(Vec<f64>);

impl Binomials {
    pub fn new(occasions: usize) -> Self {
        let kk = occasions as f64;
        Binomials(
            (0..=occasions)
                .map(|k| {
                    let k = k as f64;
                    (ln_gamma(kk + 1.0) - ln_gamma(k + 1.0) - ln_gamma(kk - k + 1.0))
                        .exp()
                        .round()
                })
                .collect(),
        )
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    /// `C(K,k) g^k (1-g)^(K-k)`, with `1-g` passed separately so the caller
    /// can compute it without cancellation.
    #[inline]
    pub fn pmf(&self, k: usize, g: f64, one_minus_g: f64) -> f64 {
        let kk = self.0.len() - 1;
        self.0[k] * g.powi(k as i32) * one_minus_g.powi((kk - k) as i32)
    }
}

/// Model family together with its cell layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    family: Family,
    occasions: usize,
    dim: usize,
    cells: Vec<Cell>,
    binomials: Binomials,
}

impl ModelFamily {
    pub fn new(family: Family, occasions: usize, dim: usize) -> Result<Self> {
        if occasions == 0 || occasions > MAX_OCCASIONS {
            return Err(Error::InvalidData(format!(
                "number of capture occasions must be in 1..={MAX_OCCASIONS}, got {occasions}"
            )));
        }
        let mut cells = vec![Cell::Zero];
        match family {
            Family::Base => cells.extend((1..=occasions).map(|k| Cell::Count { k })),
            Family::Extended => {
                for j in 0..=1u8 {
                    cells.extend((1..=occasions).map(|k| Cell::Joint { j, k }));
                }
            }
        }
        Ok(ModelFamily { family, occasions, dim, cells, binomials: Binomials::new(occasions) })
    }

    pub fn for_dataset(family: Family, data: &CaptureDataset) -> Result<Self> {
        ModelFamily::new(family, data.occasions(), data.dim())
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn occasions(&self) -> usize {
        self.occasions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The full constraint index set, before any zero cells are dropped.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn binomials(&self) -> &Binomials {
        &self.binomials
    }

    pub fn cell_index(&self, cell: Cell) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }

    /// Value of the cell probability for one individual given `g` and `1-g`.
    #[inline]
    pub(crate) fn cell_value(&self, cell: Cell, g: f64, one_minus_g: f64, x: Option<u8>) -> f64 {
        match cell {
            Cell::Zero => one_minus_g.powi(self.occasions as i32),
            Cell::Count { k } => self.binomials.pmf(k, g, one_minus_g),
            Cell::Joint { j, k } => {
                if x == Some(j) {
                    self.binomials.pmf(k, g, one_minus_g)
                } else {
                    0.0
                }
            }
        }
    }
}

/// `g(z; beta) = exp(beta'z) / (1 + exp(beta'z))`.
pub fn capture_prob(z: &[f64], beta: &[f64]) -> Result<f64> {
    Ok(logistic(linear_predictor(z, beta)?))
}

pub fn linear_predictor(z: &[f64], beta: &[f64]) -> Result<f64> {
    if z.len() != beta.len() {
        return Err(Error::DimensionMismatch { expected: beta.len(), got: z.len() });
    }
    Ok(dot(z, beta))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability of cell `cell` for an individual with covariates `z`.
///
/// For the base family this is `C(K,k) g^k (1-g)^(K-k)`; extended cells carry
/// the extra indicator `I(x = j)`.
pub fn cell_prob(
    z: &[f64],
    x: Option<u8>,
    cell: Cell,
    family: &ModelFamily,
    beta: &[f64],
) -> Result<f64> {
    let k = cell.captures();
    if k > family.occasions() {
        return Err(Error::CellOutOfRange { index: k, occasions: family.occasions() });
    }
    if family.cell_index(cell).is_none() {
        return Err(Error::InvalidData(format!(
            "cell {cell:?} does not belong to the {} family",
            family.family()
        )));
    }
    if matches!(cell, Cell::Joint { .. }) && x.is_none() {
        return Err(Error::MissingAlwaysObserved);
    }
    let eta = linear_predictor(z, beta)?;
    Ok(family.cell_value(cell, logistic(eta), logistic(-eta), x))
}

/// Base-family cell probability by capture count `k` in `0..=K`.
pub fn count_prob(z: &[f64], k: usize, family: &ModelFamily, beta: &[f64]) -> Result<f64> {
    if k > family.occasions() {
        return Err(Error::CellOutOfRange { index: k, occasions: family.occasions() });
    }
    let eta = linear_predictor(z, beta)?;
    Ok(family.binomials().pmf(k, logistic(eta), logistic(-eta)))
}

/// Active-constraint mask over a family's cells. Cell 0 is always active;
/// a capture cell is active when at least one incomplete individual falls in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintMask(pub Vec<bool>);

impl ConstraintMask {
    pub fn all(n_cells: usize) -> Self {
        ConstraintMask(vec![true; n_cells])
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&a| a)
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }
}

/// Estimating-function vector `U(z; alpha, beta)`: each component is the
/// cell probability minus the matching `alpha` component. Inactive cells are
/// removed when a mask is supplied.
pub fn constraint_vector(
    z: &[f64],
    x: Option<u8>,
    alpha: &[f64],
    beta: &[f64],
    family: &ModelFamily,
    mask: Option<&ConstraintMask>,
) -> Result<Vec<f64>> {
    if alpha.len() != family.n_cells() {
        return Err(Error::DimensionMismatch { expected: family.n_cells(), got: alpha.len() });
    }
    if family.family() == Family::Extended && x.is_none() {
        return Err(Error::MissingAlwaysObserved);
    }
    let eta = linear_predictor(z, beta)?;
    let (g, h) = (logistic(eta), logistic(-eta));
    Ok(family
        .cells()
        .iter()
        .enumerate()
        .filter(|(c, _)| mask.is_none_or(|m| m.is_active(*c)))
        .map(|(c, &cell)| family.cell_value(cell, g, h, x) - alpha[c])
        .collect())
}

/// Tabulation of incomplete individuals into cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    pub family: Family,
    pub occasions: usize,
    /// Counts aligned with the family's cells. Entry 0 (never captured) is
    /// always 0 here; its count `nu - n` depends on the abundance.
    pub counts: Vec<usize>,
    pub mask: ConstraintMask,
}

impl CellCounts {
    pub fn count(&self, cell: usize) -> usize {
        self.counts[cell]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Counts incomplete records by capture count (and always-observed level for
/// the extended family), together with the zero-cell mask.
pub fn summarize(data: &CaptureDataset, family: &ModelFamily) -> Result<CellCounts> {
    let mut counts = vec![0usize; family.n_cells()];
    for r in data.incomplete() {
        let cell = match family.family() {
            Family::Base => Cell::Count { k: r.captures },
            Family::Extended => {
                Cell::Joint { j: r.always_observed.ok_or(Error::MissingAlwaysObserved)?, k: r.captures }
            }
        };
        let c = family
            .cell_index(cell)
            .ok_or(Error::CellOutOfRange { index: r.captures, occasions: family.occasions() })?;
        counts[c] += 1;
    }
    if family.family() == Family::Extended && !data.has_always_observed() {
        return Err(Error::MissingAlwaysObserved);
    }
    let mask = ConstraintMask(
        family
            .cells()
            .iter()
            .enumerate()
            .map(|(c, &cell)| cell == Cell::Zero || counts[c] > 0)
            .collect(),
    );
    Ok(CellCounts { family: family.family(), occasions: family.occasions(), counts, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base(k: usize) -> ModelFamily {
        ModelFamily::new(Family::Base, k, 2).unwrap()
    }

    #[test]
    fn capture_prob_examples() {
        assert_eq!(capture_prob(&[1.0, 2.0], &[-2.0, 1.0]).unwrap(), 0.5);
        let oracle = (-2.0f64).exp() / (1.0 + (-2.0f64).exp());
        assert_relative_eq!(capture_prob(&[1.0, 0.0], &[-2.0, 1.0]).unwrap(), oracle, epsilon = 1e-15);
        assert_relative_eq!(oracle, 0.11920292, epsilon = 1e-8);
        assert_eq!(capture_prob(&[1.0, 1000.0], &[-2.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(
            capture_prob(&[1.0], &[-2.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cell_prob_examples() {
        let fam = base(2);
        let z = [1.0, 2.0];
        let b = [-2.0, 1.0];
        let probs: Vec<f64> = (0..=2).map(|k| count_prob(&z, k, &fam, &b).unwrap()).collect();
        assert_relative_eq!(probs[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(probs[1], 0.5, epsilon = 1e-15);
        assert_relative_eq!(probs[2], 0.25, epsilon = 1e-15);
        assert!(matches!(count_prob(&z, 3, &fam, &b), Err(Error::CellOutOfRange { .. })));

        let g = (-2.0f64).exp() / (1.0 + (-2.0f64).exp());
        let p0 = count_prob(&[1.0, 0.0], 0, &base(5), &b).unwrap();
        assert_relative_eq!(p0, (1.0 - g).powi(5), epsilon = 1e-14);
        assert_relative_eq!(p0, 0.5301262701664536, epsilon = 1e-14);
    }

    #[test]
    fn binomials_are_exact_integers() {
        let b = Binomials::new(17);
        assert_eq!(b.get(0), 1.0);
        assert_eq!(b.get(8), 24310.0);
        assert_relative_eq!(Binomials::new(64).get(32), 1_832_624_140_942_590_534.0, max_relative = 1e-13);
    }

    #[test]
    fn constraint_vector_examples() {
        let fam = base(2);
        let z = [1.0, 2.0];
        let b = [-2.0, 1.0];
        let u = constraint_vector(&z, None, &[0.25, 0.5, 0.25], &b, &fam, None).unwrap();
        for v in u {
            assert!(v.abs() < 1e-15);
        }
        let u = constraint_vector(&z, None, &[0.2, 0.5, 0.25], &b, &fam, None).unwrap();
        assert_relative_eq!(u[0], 0.05, epsilon = 1e-15);
        assert!(u[1].abs() < 1e-15 && u[2].abs() < 1e-15);

        let mask = ConstraintMask(vec![true, false, true]);
        let u = constraint_vector(&z, None, &[0.2, 0.5, 0.25], &b, &fam, Some(&mask)).unwrap();
        assert_eq!(u.len(), 2);
    }

    #[test]
    fn extended_constraint_vector_example() {
        let fam = ModelFamily::new(Family::Extended, 2, 3).unwrap();
        let z = [1.0, 1.0, 1.0];
        let b = [-2.0, 1.0, 1.0];
        // cells: 0, (0,1), (0,2), (1,1), (1,2)
        let alpha = [0.1, 0.2, 0.3, 0.15, 0.05];
        let u = constraint_vector(&z, Some(1), &alpha, &b, &fam, None).unwrap();
        assert_relative_eq!(u[0], 0.25 - 0.1, epsilon = 1e-15);
        assert_relative_eq!(u[1], -0.2, epsilon = 1e-15);
        assert_relative_eq!(u[2], -0.3, epsilon = 1e-15);
        assert_relative_eq!(u[3], 0.5 - 0.15, epsilon = 1e-15);
        assert_relative_eq!(u[4], 0.25 - 0.05, epsilon = 1e-15);
        assert!(matches!(
            constraint_vector(&z, None, &alpha, &b, &fam, None),
            Err(Error::MissingAlwaysObserved)
        ));
    }

    #[test]
    fn summarize_examples() {
        let recs = vec![
            Record::complete(1, vec![1.0, 0.3]),
            Record::missing(1),
            Record::missing(1),
            Record::missing(2),
        ];
        let data = CaptureDataset::new(2, recs).unwrap();
        let fam = ModelFamily::for_dataset(Family::Base, &data).unwrap();
        let s = summarize(&data, &fam).unwrap();
        assert_eq!(s.counts, vec![0, 2, 1]);
        assert!(s.mask.is_full());

        let data = CaptureDataset::new(2, vec![Record::complete(2, vec![1.0, 0.3])]).unwrap();
        let s = summarize(&data, &fam).unwrap();
        assert_eq!(s.counts, vec![0, 0, 0]);
        assert_eq!(s.mask.0, vec![true, false, false]);

        let recs = vec![
            Record::complete(2, vec![1.0, 0.0, 0.3]).with_always_observed(0),
            Record::missing(1).with_always_observed(0),
            Record::missing(1).with_always_observed(1),
            Record::missing(3).with_always_observed(1),
        ];
        let data = CaptureDataset::new(5, recs).unwrap();
        let fam = ModelFamily::for_dataset(Family::Extended, &data).unwrap();
        let s = summarize(&data, &fam).unwrap();
        let idx = |j, k| fam.cell_index(Cell::Joint { j, k }).unwrap();
        assert_eq!(s.counts[idx(0, 1)], 1);
        assert_eq!(s.counts[idx(1, 1)], 1);
        assert_eq!(s.counts[idx(1, 3)], 1);
        assert_eq!(s.total(), 3);
    }

    #[test]
    fn dataset_validation() {
        assert!(CaptureDataset::new(2, vec![Record::missing(0)]).is_err());
        assert!(CaptureDataset::new(2, vec![Record::missing(3)]).is_err());
        assert!(CaptureDataset::new(2, vec![Record::complete(1, vec![0.5, 1.0])]).is_err());
        assert!(CaptureDataset::new(65, vec![]).is_err());
        let mixed = vec![Record::complete(1, vec![1.0, 1.0]), Record::complete(1, vec![1.0])];
        assert!(matches!(CaptureDataset::new(2, mixed), Err(Error::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn cell_probs_sum_to_one(k in 1usize..=20, y in -5.0f64..5.0, b0 in -4.0f64..4.0, b1 in -3.0f64..3.0) {
            let fam = base(k);
            let total: f64 = (0..=k).map(|c| count_prob(&[1.0, y], c, &fam, &[b0, b1]).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constraint_components_plus_alpha_sum_to_one(
            k in 1usize..=8, y in -3.0f64..3.0, b1 in -2.0f64..2.0,
            raw in proptest::collection::vec(0.01f64..1.0, 9),
        ) {
            let fam = base(k);
            let alpha = &raw[..=k];
            let u = constraint_vector(&[1.0, y], None, alpha, &[-0.5, b1], &fam, None).unwrap();
            let s: f64 = u.iter().sum::<f64>() + alpha.iter().sum::<f64>();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn capture_prob_increases_with_positive_coefficient(
            y in -5.0f64..5.0, w in -3.0f64..3.0, b1 in 0.05f64..3.0,
        ) {
            let h = 1e-4;
            let lo = capture_prob(&[1.0, y, w], &[-1.0, b1, 0.3]).unwrap();
            let hi = capture_prob(&[1.0, y + h, w], &[-1.0, b1, 0.3]).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn extended_cells_aggregate_to_base(
            k in 1usize..=6, y in -3.0f64..3.0, x in 0u8..=1,
            raw in proptest::collection::vec(0.01f64..0.5, 13),
        ) {
            let ext = ModelFamily::new(Family::Extended, k, 3).unwrap();
            let bas = ModelFamily::new(Family::Base, k, 3).unwrap();
            let z = [1.0, x as f64, y];
            let beta = [-1.0, 0.7, 0.4];
            let alpha_e = &raw[..ext.n_cells()];
            let ue = constraint_vector(&z, Some(x), alpha_e, &beta, &ext, None).unwrap();
            let mut alpha_b = vec![alpha_e[0]];
            for kk in 1..=k {
                let i0 = ext.cell_index(Cell::Joint { j: 0, k: kk }).unwrap();
                let i1 = ext.cell_index(Cell::Joint { j: 1, k: kk }).unwrap();
                alpha_b.push(alpha_e[i0] + alpha_e[i1]);
            }
            let ub = constraint_vector(&z, None, &alpha_b, &beta, &bas, None).unwrap();
            prop_assert!((ue[0] - ub[0]).abs() < 1e-14);
            for kk in 1..=k {
                let i0 = ext.cell_index(Cell::Joint { j: 0, k: kk }).unwrap();
                let i1 = ext.cell_index(Cell::Joint { j: 1, k: kk }).unwrap();
                prop_assert!((ue[i0] + ue[i1] - ub[kk]).abs() < 1e-14);
            }
        }
    }
}
