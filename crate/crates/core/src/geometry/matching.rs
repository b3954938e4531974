use crate::error::{Error, Result};
use crate::par;
use crate::patch_features::{squared_distance, DescriptorGrid};

/// One live/reference correspondence between patch cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    /// `(row, col)` in the live grid.
    pub live_cell: (usize, usize),
    /// `(row, col)` in the reference grid.
    pub ref_cell: (usize, usize),
    pub distance: f64,
    /// Pixel position `(x, y)` of the live patch center.
    pub live_pt: [f64; 2],
    /// Pixel position `(x, y)` of the matched reference location.
    pub ref_pt: [f64; 2],
}

/// One-to-one set of matches: no live or reference cell appears twice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs with live and reference sides exchanged.
    pub fn reversed(&self) -> MatchSet {
        let mut pairs: Vec<MatchPair> = self
            .pairs
            .iter()
            .map(|p| MatchPair {
                live_cell: p.ref_cell,
                ref_cell: p.live_cell,
                distance: p.distance,
                live_pt: p.ref_pt,
                ref_pt: p.live_pt,
            })
            .collect();
        pairs.sort_by_key(|p| p.live_cell);
        MatchSet { pairs }
    }
}

/// Position of the first minimum.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, v) in values.enumerate() {
        if v < best.1 {
            best = (k, v);
        }
    }
    best.0
}

fn center_f64(grid: &DescriptorGrid, idx: usize) -> [f64; 2] {
    let [x, y] = grid.center(idx);
    [x as f64, y as f64]
}

/// Mutual nearest neighbors under L2 distance.
///
/// A pair `(a, b)` is kept iff `b` is the nearest reference descriptor to `a`
/// and `a` is the nearest live descriptor to `b`. Zero descriptors never
/// participate. Ties go to the lowest row-major index. Pairs come out in
/// live row-major order.
pub fn mutual_nearest_neighbors(live: &DescriptorGrid, reference: &DescriptorGrid) -> Result<MatchSet> {
    if live.dim() != reference.dim() {
        return Err(Error::invalid(format!(
            "descriptor dimensions differ: live {} vs reference {}",
            live.dim(),
            reference.dim()
        )));
    }
    let live_ids: Vec<usize> = (0..live.len()).filter(|&i| !live.is_zero(i)).collect();
    let ref_ids: Vec<usize> = (0..reference.len()).filter(|&i| !reference.is_zero(i)).collect();
    if live_ids.is_empty() || ref_ids.is_empty() {
        return Ok(MatchSet::default());
    }

    // Row a holds squared distances from live_ids[a] to every reference candidate.
    let rows: Vec<Vec<f64>> = par::map_slice(&live_ids, |&a| {
        let da = live.descriptor(a);
        ref_ids
            .iter()
            .map(|&b| squared_distance(da, reference.descriptor(b)))
            .collect()
    });

    let best_ref: Vec<usize> = rows.iter().map(|row| argmin(row.iter().copied())).collect();
    let best_live: Vec<usize> = (0..ref_ids.len())
        .map(|col| argmin(rows.iter().map(|row| row[col])))
        .collect();

    let pairs = best_ref
        .iter()
        .enumerate()
        .filter(|&(a, &b)| best_live[b] == a)
        .map(|(a, &b)| {
            let (li, ri) = (live_ids[a], ref_ids[b]);
            MatchPair {
                live_cell: live.cell(li),
                ref_cell: reference.cell(ri),
                distance: rows[a][b].sqrt(),
                live_pt: center_f64(live, li),
                ref_pt: center_f64(reference, ri),
            }
        })
        .collect();
    Ok(MatchSet { pairs })
}
