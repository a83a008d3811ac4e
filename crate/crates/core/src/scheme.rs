//! Case-deletion schemes: which units each fold removes and, for leave-end-out,
//! the order they are removed in and where estimands are evaluated.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A conditionally independent observation unit `(g, i)`, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitIndex {
    pub group: usize,
    pub within: usize,
}

impl UnitIndex {
    pub const fn new(group: usize, within: usize) -> Self {
        Self { group, within }
    }
}

impl fmt::Display for UnitIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.group, self.within)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Loo,
    Lgo,
    LeoWithin,
    LeoAcross,
    Lso,
}

impl SchemeKind {
    pub fn is_leo(self) -> bool {
        matches!(self, SchemeKind::LeoWithin | SchemeKind::LeoAcross)
    }
}

/// One deletion index set `I_k`.
///
/// `units` is stored in deletion order. `ranks[j]` is the 1-based position of
/// `units[j]` on the ordered-deletion path; units sharing a rank are removed
/// simultaneously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub units: Vec<UnitIndex>,
    pub ranks: Vec<usize>,
}

impl Fold {
    /// A fold whose units are deleted one at a time in the given order.
    pub fn sequential(units: Vec<UnitIndex>) -> Self {
        let ranks = (1..=units.len()).collect();
        Self { units, ranks }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Number of distinct deletion stages on the ordered path.
    pub fn stages(&self) -> usize {
        self.ranks.iter().copied().max().unwrap_or(0)
    }

    /// Units removed at a given stage (1-based).
    pub fn units_at_rank(&self, rank: usize) -> impl Iterator<Item = UnitIndex> + '_ {
        self.units
            .iter()
            .zip(&self.ranks)
            .filter(move |(_, &r)| r == rank)
            .map(|(u, _)| *u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionScheme {
    pub kind: SchemeKind,
    pub folds: Vec<Fold>,
    /// Leave-end-out only: deletion stages at which estimands are evaluated.
    pub checkpoints: Vec<usize>,
    /// Set when some group has fewer items than there are folds.
    pub unbalanced: bool,
}

impl DeletionScheme {
    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Fold::len).collect()
    }

    pub fn validate(&self, sizes: &[usize]) -> Result<()> {
        if self.folds.is_empty() {
            return Err(Error::InvalidScheme("no folds".into()));
        }
        for (k, fold) in self.folds.iter().enumerate() {
            if fold.is_empty() {
                return Err(Error::InvalidScheme(format!("fold {} is empty", k + 1)));
            }
            if fold.ranks.len() != fold.units.len() {
                return Err(Error::InvalidScheme(format!("fold {} rank/unit length mismatch", k + 1)));
            }
            for u in &fold.units {
                if u.group == 0 || u.group > sizes.len() || u.within == 0 || u.within > sizes[u.group - 1] {
                    return Err(Error::InvalidScheme(format!("unit {u} out of range")));
                }
            }
        }
        if matches!(self.kind, SchemeKind::Loo | SchemeKind::Lgo | SchemeKind::Lso) {
            let mut seen = HashSet::new();
            for u in self.folds.iter().flat_map(|f| &f.units) {
                if !seen.insert(*u) {
                    return Err(Error::InvalidScheme(format!("unit {u} appears in more than one fold")));
                }
            }
        }
        if self.kind.is_leo() {
            let last = self.folds[0].stages();
            let increasing = self.checkpoints.windows(2).all(|w| w[0] < w[1]);
            if self.checkpoints.is_empty() || !increasing || self.checkpoints.last() != Some(&last) {
                return Err(Error::InvalidScheme(
                    "checkpoints must be strictly increasing and end at the deletion count".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    if let Some(g) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::EmptyGroup(g + 1));
    }
    Ok(())
}

/// Leave-one-out: every unit is its own fold.
pub fn build_loo_scheme(sizes: &[usize]) -> Result<DeletionScheme> {
    check_sizes(sizes)?;
    let folds = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| (1..=n).map(move |i| Fold::sequential(vec![UnitIndex::new(g + 1, i)])))
        .collect();
    Ok(DeletionScheme { kind: SchemeKind::Loo, folds, checkpoints: vec![], unbalanced: false })
}

/// Leave-group-out: fold `g` removes every unit of group `g`.
pub fn build_lgo_scheme(sizes: &[usize]) -> Result<DeletionScheme> {
    check_sizes(sizes)?;
    let folds = sizes
        .iter()
        .enumerate()
        .map(|(g, &n)| Fold::sequential((1..=n).map(|i| UnitIndex::new(g + 1, i)).collect()))
        .collect();
    Ok(DeletionScheme { kind: SchemeKind::Lgo, folds, checkpoints: vec![], unbalanced: false })
}

/// Group K-fold: each group's items are shuffled and dealt round-robin over
/// the folds, so every group is spread evenly (±1 item) across all folds.
///
/// The dealing position carries over from one group to the next, which keeps
/// total fold sizes balanced when groups are smaller than `k`.
pub fn build_group_kfold_scheme<R: Rng + ?Sized>(
    sizes: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<DeletionScheme> {
    check_sizes(sizes)?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("group K-fold needs K >= 2, got {k}")));
    }
    let mut folds: Vec<Vec<UnitIndex>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for (g, &n) in sizes.iter().enumerate() {
        let mut items: Vec<usize> = (1..=n).collect();
        items.shuffle(rng);
        for i in items {
            folds[cursor % k].push(UnitIndex::new(g + 1, i));
            cursor += 1;
        }
    }
    let unbalanced = sizes.iter().any(|&n| n < k);
    if folds.iter().any(Vec::is_empty) {
        return Err(Error::InvalidScheme(format!("K={k} exceeds the total number of units")));
    }
    let folds = folds
        .into_iter()
        .map(|mut units| {
            units.sort();
            Fold::sequential(units)
        })
        .collect();
    Ok(DeletionScheme { kind: SchemeKind::Lso, folds, checkpoints: vec![], unbalanced })
}

/// Leave-subset-out from explicit index sets.
pub fn build_lso_scheme(sizes: &[usize], sets: Vec<Vec<UnitIndex>>) -> Result<DeletionScheme> {
    check_sizes(sizes)?;
    let scheme = DeletionScheme {
        kind: SchemeKind::Lso,
        folds: sets.into_iter().map(Fold::sequential).collect(),
        checkpoints: vec![],
        unbalanced: false,
    };
    scheme.validate(sizes)?;
    Ok(scheme)
}

/// Which series a leave-end-out schedule trims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeoTarget {
    Group(usize),
    All,
}

/// Backward-sequential leave-end-out: removes time indices `T, T-1, ..., t_min+1`
/// one stage at a time. With [`LeoTarget::All`] every group must have length
/// `horizon` and all groups lose the same time index together.
pub fn build_leo_schedule(
    target: LeoTarget,
    sizes: &[usize],
    horizon: usize,
    t_min: usize,
) -> Result<DeletionScheme> {
    check_sizes(sizes)?;
    if t_min >= horizon {
        return Err(Error::InvalidArgument(format!("t_min={t_min} must be below horizon T={horizon}")));
    }
    let stages = horizon - t_min;
    let (kind, units, ranks) = match target {
        LeoTarget::Group(g) => {
            if g == 0 || g > sizes.len() || sizes[g - 1] != horizon {
                return Err(Error::InvalidArgument(format!("group {g} does not have length {horizon}")));
            }
            let units: Vec<_> = (t_min + 1..=horizon).rev().map(|t| UnitIndex::new(g, t)).collect();
            (SchemeKind::LeoWithin, units, (1..=stages).collect())
        }
        LeoTarget::All => {
            if sizes.iter().any(|&n| n != horizon) {
                return Err(Error::InvalidArgument("across-group LEO needs equal series lengths".into()));
            }
            let mut units = Vec::new();
            let mut ranks = Vec::new();
            for t in (t_min + 1..=horizon).rev() {
                for g in 1..=sizes.len() {
                    units.push(UnitIndex::new(g, t));
                    ranks.push(horizon - t + 1);
                }
            }
            (SchemeKind::LeoAcross, units, ranks)
        }
    };
    Ok(DeletionScheme {
        kind,
        folds: vec![Fold { units, ranks }],
        checkpoints: (1..=stages).collect(),
        unbalanced: false,
    })
}

/// What each fold reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimandSpec {
    /// `log Σ_r W_r Π_{u∈I_k} p(y_u | Θ_r)`.
    Joint,
    /// `Σ_{u∈I_k} log Σ_r W_r p(y_u | Θ_r)`.
    Pointwise,
    /// Leave-end-out `h`-step-ahead log predictive density at each checkpoint.
    MultiStep { horizon: usize },
}

impl Default for EstimandSpec {
    fn default() -> Self {
        EstimandSpec::Joint
    }
}

impl EstimandSpec {
    pub fn validate(&self, kind: SchemeKind) -> Result<()> {
        match *self {
            EstimandSpec::MultiStep { horizon } if horizon < 1 => {
                Err(Error::InvalidArgument("estimand horizon must be >= 1".into()))
            }
            EstimandSpec::MultiStep { .. } if !kind.is_leo() => {
                Err(Error::InvalidArgument("multi-step estimand requires a leave-end-out scheme".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EstimandSpec::MultiStep { horizon } => horizon,
            _ => 1,
        }
    }
}
