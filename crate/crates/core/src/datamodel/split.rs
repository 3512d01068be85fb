use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CohortTable, DataError, Split};

pub type SplitFractions = [f64; 3];

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub cohort: CohortTable,
    pub warnings: Vec<String>,
}

const FRAC_EPS: f64 = 1e-9;

/// Largest-remainder apportionment of `n` items by `fractions`; ties go to the
/// lower index.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + FRAC_EPS).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Assigns train/val/test within every (tissue, response) stratum.
///
/// Each stratum gets the floor or ceiling of its proportional quota, and the
/// cells are chosen so the split totals equal the largest-remainder
/// apportionment of the whole cohort. Rounding strata independently can drift
/// several samples away from the global proportions.
pub fn stratified_split(
    cohort: &CohortTable,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitOutcome, DataError> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::Fractions(fractions));
    }
    let mut strata: BTreeMap<(usize, u8), Vec<usize>> = BTreeMap::new();
    for (i, r) in cohort.records.iter().enumerate() {
        strata.entry((r.tissue_code, r.response)).or_default().push(i);
    }

    let mut warnings = Vec::new();
    let mut out = cohort.clone();
    let mut eligible = Vec::new();
    for (&(tissue, y), members) in &strata {
        if members.len() < Split::ALL.len() {
            warnings.push(format!(
                "stratum (tissue={}, response={y}) has {} samples; assigned entirely to train",
                cohort.tissues[tissue],
                members.len()
            ));
            for &i in members {
                out.records[i].split = Some(Split::Train);
            }
        } else {
            eligible.push(members);
        }
    }

    let sizes: Vec<usize> = eligible.iter().map(|m| m.len()).collect();
    let cells = controlled_round(&sizes, &fractions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (members, counts) in eligible.iter().zip(&cells) {
        let mut shuffled = (*members).clone();
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for (split, &c) in Split::ALL.iter().zip(counts) {
            for i in it.by_ref().take(c) {
                out.records[i].split = Some(*split);
            }
        }
    }
    Ok(SplitOutcome {
        cohort: out,
        warnings,
    })
}

/// Rounds the table `sizes[s] * fractions[k]` so each cell is a floor or
/// ceiling, rows sum to `sizes` and columns sum to `apportion(total)`.
pub(crate) fn controlled_round(sizes: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let k = fractions.len();
    let total: usize = sizes.iter().sum();
    let targets = apportion(total, fractions);
    let quota = |s: usize, j: usize| sizes[s] as f64 * fractions[j];
    let mut cells: Vec<Vec<usize>> = (0..sizes.len())
        .map(|s| (0..k).map(|j| (quota(s, j) + FRAC_EPS).floor() as usize).collect())
        .collect();
    let mut row_need: Vec<usize> = (0..sizes.len())
        .map(|s| sizes[s] - cells[s].iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..k)
        .map(|j| targets[j] - cells.iter().map(|r| r[j]).sum::<usize>())
        .collect();
    // Cells eligible for rounding up, most-preferred first.
    let can_raise = |s: usize, j: usize| quota(s, j) - cells_floor(quota(s, j)) > FRAC_EPS;
    let mut raised = vec![vec![false; k]; sizes.len()];

    for s in 0..sizes.len() {
        while row_need[s] > 0 {
            let mut prefs: Vec<usize> = (0..k).filter(|&j| can_raise(s, j) && !raised[s][j]).collect();
            prefs.sort_by(|&a, &b| {
                let fa = quota(s, a) - cells_floor(quota(s, a));
                let fb = quota(s, b) - cells_floor(quota(s, b));
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            if let Some(&j) = prefs.iter().find(|&&j| col_need[j] > 0) {
                raised[s][j] = true;
                cells[s][j] += 1;
                row_need[s] -= 1;
                col_need[j] -= 1;
                continue;
            }
            // Every raisable column of this row is full: move a unit along an
            // alternating path so some full column frees up for this row.
            if !augment(s, &prefs, &mut raised, &mut cells, &mut col_need, &can_raise) {
                // Cannot happen for floor/ceil tables with rounded margins; fall
                // back to per-row largest remainder to stay total-preserving.
                let fallback = apportion(sizes[s], fractions);
                cells[s] = fallback;
                row_need[s] = 0;
            } else {
                row_need[s] -= 1;
            }
        }
    }
    cells
}

fn cells_floor(q: f64) -> f64 {
    (q + FRAC_EPS).floor()
}

/// Breadth-first search for an alternating path starting at row `s`: raise
/// (s, j0), lower (r1, j0), raise (r1, j1), … ending at a column with spare
/// demand.
fn augment(
    s: usize,
    first_cols: &[usize],
    raised: &mut [Vec<bool>],
    cells: &mut [Vec<usize>],
    col_need: &mut [usize],
    can_raise: &dyn Fn(usize, usize) -> bool,
) -> bool {
    let rows = raised.len();
    let k = col_need.len();
    // parent of column j: (row that raises j, column that row gave up or None)
    let mut col_parent: Vec<Option<(usize, Option<usize>)>> = vec![None; k];
    let mut queue = std::collections::VecDeque::new();
    for &j in first_cols {
        col_parent[j] = Some((s, None));
        queue.push_back(j);
    }
    while let Some(j) = queue.pop_front() {
        for r in 0..rows {
            if r == s || !raised[r][j] {
                continue;
            }
            for j2 in 0..k {
                if col_parent[j2].is_some() || raised[r][j2] || !can_raise(r, j2) {
                    continue;
                }
                col_parent[j2] = Some((r, Some(j)));
                if col_need[j2] > 0 {
                    let mut c = j2;
                    loop {
                        let (row, prev) = col_parent[c].expect("on path");
                        raised[row][c] = true;
                        cells[row][c] += 1;
                        match prev {
                            Some(p) => {
                                raised[row][p] = false;
                                cells[row][p] -= 1;
                                c = p;
                            }
                            None => break,
                        }
                    }
                    col_need[j2] -= 1;
                    return true;
                }
                queue.push_back(j2);
            }
        }
    }
    false
}
