//! Hard evaluation metrics: DSC, Jaccard, 95th-percentile Hausdorff
//! distance and per-region overlap for masks; accuracy, recall, precision
//! and rank AUC for prognosis.
//!
//! Conventions:
//! * both masks empty gives DSC = Jaccard = 100;
//! * boundary pixels are foreground pixels with at least one
//!   8-neighbour that is background or outside the raster;
//! * 95HD pools both directed boundary-to-boundary distance sets and
//!   takes the linearly interpolated 95th percentile; if either mask is
//!   empty it returns the raster diagonal and flags the case;
//! * PRO averages, over 8-connected ground-truth components, the covered
//!   fraction of each component; undefined (flagged) for empty ground truth;
//! * the positive class is "poor prognosis" (label 1), threshold 0.5;
//! * AUC is the Mann-Whitney statistic with midranks for ties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let (a, b) = (pred.count(), gt.count());
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * pred.intersection_count(gt) as f64 / (a + b) as f64)
}

pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let u = pred.union_count(gt);
    if u == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * pred.intersection_count(gt) as f64 / u as f64)
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

pub fn boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (m.width as isize, m.height as isize);
    m.foreground()
        .filter(|&(x, y)| {
            NEIGHBOURS.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx < 0 || ny < 0 || nx >= w || ny >= h || !m.get(nx as usize, ny as usize)
            })
        })
        .collect()
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform along one line.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `seed` pixel.
pub fn squared_distance_transform(width: usize, height: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; width * height];
    for &(x, y) in seeds {
        grid[y * width + x] = 0.0;
    }
    let n = width.max(height);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for x in 0..width {
        for y in 0..height {
            line[y] = grid[y * width + x];
        }
        edt_1d(&line[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        line[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&line[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Linear interpolation between order statistics of sorted values.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub distance: f64,
    /// Set when a mask was empty and `distance` is the raster diagonal.
    pub sentinel: bool,
}

pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Hd95> {
    pred.check_same_shape(gt)?;
    let (w, h) = (pred.width, pred.height);
    if pred.is_empty() || gt.is_empty() {
        return Ok(Hd95 {
            distance: ((w * w + h * h) as f64).sqrt(),
            sentinel: true,
        });
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let dt_p = squared_distance_transform(w, h, &bp);
    let dt_g = squared_distance_transform(w, h, &bg);
    let mut d: Vec<f64> = bp
        .iter()
        .map(|&(x, y)| dt_g[y * w + x].sqrt())
        .chain(bg.iter().map(|&(x, y)| dt_p[y * w + x].sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(Hd95 {
        distance: percentile_sorted(&d, 95.0),
        sentinel: false,
    })
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Component label per pixel (`usize::MAX` for background) and count.
pub fn label_components(m: &BinaryMask) -> (Vec<usize>, usize) {
    let (w, h) = (m.width, m.height);
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            for (dx, dy) in [(-1isize, 0isize), (-1, -1), (0, -1), (1, -1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if m.get(nx, ny) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = vec![usize::MAX; w * h];
    let mut ids = BTreeMap::new();
    for i in 0..w * h {
        if m.data[i] {
            let r = find(&mut parent, i);
            let n = ids.len();
            labels[i] = *ids.entry(r).or_insert(n);
        }
    }
    (labels, ids.len())
}

/// Per-region overlap in percent; `None` when `gt` is empty.
pub fn pro(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let (labels, n) = label_components(gt);
    if n == 0 {
        return Ok(None);
    }
    let mut size = vec![0usize; n];
    let mut hit = vec![0usize; n];
    for (i, &l) in labels.iter().enumerate() {
        if l != usize::MAX {
            size[l] += 1;
            if pred.data[i] {
                hit[l] += 1;
            }
        }
    }
    let total: f64 = size.iter().zip(&hit).map(|(&s, &c)| c as f64 / s as f64).sum();
    Ok(Some(100.0 * total / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub hd95_sentinel: bool,
    /// `None` when the ground truth is empty.
    pub pro: Option<f64>,
    pub intersection: usize,
    pub pred_count: usize,
    pub gt_count: usize,
}

pub fn seg_scores(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegScores> {
    let h = hd95(pred, gt)?;
    Ok(SegScores {
        dsc: dsc(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: h.distance,
        hd95_sentinel: h.sentinel,
        pro: pro(pred, gt)?,
        intersection: pred.intersection_count(gt),
        pred_count: pred.count(),
        gt_count: gt.count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaScores {
    pub acc: f64,
    pub rec: f64,
    pub pre: f64,
    /// In `[0, 1]`; `None` when only one class is present.
    pub auc: Option<f64>,
    pub rec_undefined: bool,
    pub pre_undefined: bool,
}

/// Mann-Whitney AUC with midranks; `None` for a single-class label set.
pub fn auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut ranks = vec![0.0; probs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && probs[idx[j + 1]] == probs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l == 1).map(|(_, &r)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn classification_scores(probs: &[f64], labels: &[u8]) -> Result<ClaScores> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} not in {{0, 1}}")));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in probs.iter().zip(labels) {
        let pred = u8::from(p >= 0.5);
        correct += usize::from(pred == l);
        match (pred, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (100.0 * num as f64 / den as f64, false) };
    let (rec, rec_undefined) = ratio(tp, tp + fn_);
    let (pre, pre_undefined) = ratio(tp, tp + fp);
    Ok(ClaScores {
        acc: 100.0 * correct as f64 / probs.len() as f64,
        rec,
        pre,
        auc: auc(probs, labels),
        rec_undefined,
        pre_undefined,
    })
}

/// Dataset-level segmentation scores: macro means with flagged cases
/// excluded per metric, plus pooled-pixel DSC and Jaccard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegAggregate {
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub pro: Option<f64>,
    pub pooled_dsc: f64,
    pub pooled_jaccard: f64,
    pub n_cases: usize,
    pub hd95_flagged: usize,
    pub pro_flagged: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate_seg(cases: &[SegScores]) -> Result<SegAggregate> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty list".into()));
    }
    let dscs: Vec<f64> = cases.iter().map(|c| c.dsc).collect();
    let jacs: Vec<f64> = cases.iter().map(|c| c.jaccard).collect();
    let hds: Vec<f64> = cases.iter().filter(|c| !c.hd95_sentinel).map(|c| c.hd95).collect();
    let pros: Vec<f64> = cases.iter().filter_map(|c| c.pro).collect();
    let inter: usize = cases.iter().map(|c| c.intersection).sum();
    let sizes: usize = cases.iter().map(|c| c.pred_count + c.gt_count).sum();
    let (pooled_dsc, pooled_jaccard) = if sizes == 0 {
        (100.0, 100.0)
    } else {
        (
            100.0 * 2.0 * inter as f64 / sizes as f64,
            100.0 * inter as f64 / (sizes - inter) as f64,
        )
    };
    Ok(SegAggregate {
        dsc: mean(&dscs).unwrap(),
        jaccard: mean(&jacs).unwrap(),
        hd95: mean(&hds),
        pro: mean(&pros),
        pooled_dsc,
        pooled_jaccard,
        n_cases: cases.len(),
        hd95_flagged: cases.len() - hds.len(),
        pro_flagged: cases.len() - pros.len(),
    })
}

/// Macro mean of classification scores (e.g. across folds).
pub fn aggregate_cla(items: &[ClaScores]) -> Result<ClaScores> {
    if items.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty list".into()));
    }
    let m = |f: &dyn Fn(&ClaScores) -> f64| items.iter().map(f).sum::<f64>() / items.len() as f64;
    let aucs: Vec<f64> = items.iter().filter_map(|c| c.auc).collect();
    Ok(ClaScores {
        acc: m(&|c| c.acc),
        rec: m(&|c| c.rec),
        pre: m(&|c| c.pre),
        auc: mean(&aucs),
        rec_undefined: items.iter().any(|c| c.rec_undefined),
        pre_undefined: items.iter().any(|c| c.pre_undefined),
    })
}

/// Human-readable metric definitions echoed into report metadata.
pub fn definitions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("dsc", "100 * 2|A&B| / (|A| + |B|); 100 when both masks are empty"),
        ("jaccard", "100 * |A&B| / |A|B|; 100 when both masks are empty"),
        (
            "hd95",
            "linear-interpolated 95th percentile of pooled directed Euclidean distances between 8-connectivity boundary pixels; raster diagonal (flagged) if a mask is empty",
        ),
        ("pro", "100 * mean over 8-connected ground-truth components of covered fraction; undefined (flagged) for empty ground truth"),
        ("acc", "percent correct at threshold 0.5"),
        ("rec", "TP / (TP + FN) in percent, positive class = poor prognosis; 0 and flagged if undefined"),
        ("pre", "TP / (TP + FP) in percent, positive class = poor prognosis; 0 and flagged if undefined"),
        ("auc", "Mann-Whitney rank statistic with midranks, reported x100"),
        ("aggregation", "macro mean over cases excluding flagged cases per metric; pooled-pixel DSC/Jaccard also reported"),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn from_points(w: usize, h: usize, pts: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(w, h);
        for &(x, y) in pts {
            m.set(x, y, true);
        }
        m
    }

    fn random_mask(rng: &mut ChaCha8Rng, p: f64) -> BinaryMask {
        BinaryMask::new(16, 16, (0..256).map(|_| rng.random_bool(p)).collect())
    }

    fn oracle_hd95(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (ba, bb) = (boundary(a), boundary(b));
        let dist = |p: (usize, usize), q: (usize, usize)| {
            let dx = p.0 as f64 - q.0 as f64;
            let dy = p.1 as f64 - q.1 as f64;
            (dx * dx + dy * dy).sqrt()
        };
        let mut d = Vec::new();
        for &p in &ba {
            d.push(bb.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        for &q in &bb {
            d.push(ba.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        d.sort_by(f64::total_cmp);
        percentile_sorted(&d, 95.0)
    }

    fn oracle_pro(pred: &BinaryMask, gt: &BinaryMask) -> Option<f64> {
        let mut seen = vec![false; gt.data.len()];
        let mut fracs = Vec::new();
        for start in 0..gt.data.len() {
            if !gt.data[start] || seen[start] {
                continue;
            }
            let mut q = VecDeque::from([start]);
            seen[start] = true;
            let (mut size, mut hit) = (0, 0);
            while let Some(i) = q.pop_front() {
                size += 1;
                hit += usize::from(pred.data[i]);
                let (x, y) = ((i % 16) as isize, (i / 16) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (0..16).contains(&nx) && (0..16).contains(&ny) {
                            let j = (ny * 16 + nx) as usize;
                            if gt.data[j] && !seen[j] {
                                seen[j] = true;
                                q.push_back(j);
                            }
                        }
                    }
                }
            }
            fracs.push(hit as f64 / size as f64);
        }
        (!fracs.is_empty()).then(|| 100.0 * fracs.iter().sum::<f64>() / fracs.len() as f64)
    }

    #[test]
    fn overlap_examples() {
        let a = from_points(8, 8, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let b = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 2);
        assert!((dsc(&a, &b).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(jaccard(&a, &b).unwrap(), 50.0);
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 100.0);
        let far = from_points(8, 8, &[(7, 7)]);
        assert_eq!(dsc(&a, &far).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &far).unwrap(), 0.0);
        let e = BinaryMask::empty(8, 8);
        assert_eq!(dsc(&e, &e).unwrap(), 100.0);
        assert!(dsc(&a, &BinaryMask::empty(4, 4)).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = from_points(8, 8, &[(0, 0)]);
        let b = from_points(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&a, &b).unwrap().distance, 5.0);
        assert_eq!(hd95(&a, &a).unwrap().distance, 0.0);
        let e = hd95(&a, &BinaryMask::empty(8, 8)).unwrap();
        assert!(e.sentinel);
        assert!((e.distance - 128f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pro_examples() {
        let gt = from_points(8, 8, &[(0, 0), (1, 0), (6, 6), (7, 6)]);
        let pred = from_points(8, 8, &[(0, 0), (1, 0)]);
        assert_eq!(pro(&pred, &gt).unwrap(), Some(50.0));
        let all = BinaryMask::from_fn(8, 8, |_, _| true);
        assert_eq!(pro(&all, &gt).unwrap(), Some(100.0));
        assert_eq!(pro(&all, &BinaryMask::empty(8, 8)).unwrap(), None);
    }

    #[test]
    fn random_instances_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (pa, pb) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
            let a = random_mask(&mut rng, pa);
            let b = random_mask(&mut rng, pb);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            assert_eq!(hd95(&a, &b).unwrap().distance, oracle_hd95(&a, &b));
            assert_eq!(hd95(&a, &b).unwrap().distance, hd95(&b, &a).unwrap().distance);
            assert_eq!(pro(&a, &b).unwrap(), oracle_pro(&a, &b));
            let (d, j) = (dsc(&a, &b).unwrap() / 100.0, jaccard(&a, &b).unwrap() / 100.0);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-9);
        }
    }

    #[test]
    fn translation_invariance() {
        let a = BinaryMask::from_fn(16, 16, |x, y| (3..7).contains(&x) && (4..9).contains(&y));
        let b = BinaryMask::from_fn(16, 16, |x, y| (5..8).contains(&x) && (2..6).contains(&y));
        let shift = |m: &BinaryMask| BinaryMask::from_fn(16, 16, |x, y| x >= 3 && y >= 2 && m.get(x - 3, y - 2));
        let (sa, sb) = (shift(&a), shift(&b));
        assert_eq!(seg_scores(&a, &b).unwrap().dsc, seg_scores(&sa, &sb).unwrap().dsc);
        assert_eq!(hd95(&a, &b).unwrap(), hd95(&sa, &sb).unwrap());
        assert_eq!(pro(&a, &b).unwrap(), pro(&sa, &sb).unwrap());
    }

    #[test]
    fn classification_examples() {
        let s = classification_scores(&[0.9, 0.8, 0.3], &[1, 0, 0]).unwrap();
        assert_eq!(s.auc, Some(1.0));
        assert!((s.acc - 200.0 / 3.0).abs() < 1e-9);
        let s = classification_scores(&[0.5; 4], &[0, 1, 0, 1]).unwrap();
        assert_eq!(s.auc, Some(0.5));
        let s = classification_scores(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_eq!((s.acc, s.auc), (100.0, Some(1.0)));
        let s = classification_scores(&[0.1, 0.2], &[0, 0]).unwrap();
        assert_eq!(s.auc, None);
        assert!(s.pre_undefined && s.rec_undefined);
        assert!(classification_scores(&[], &[]).is_err());
        assert!(classification_scores(&[0.5], &[2]).is_err());
    }

    #[test]
    fn auc_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..30);
            let probs: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mut won = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        won += if probs[i] > probs[j] { 1.0 } else if probs[i] == probs[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            let expected = (pairs > 0.0).then(|| won / pairs);
            match (auc(&probs, &labels), expected) {
                (Some(a), Some(e)) => assert!((a - e).abs() < 1e-12),
                (a, e) => assert_eq!(a, e),
            }
        }
    }

    #[test]
    fn aggregation() {
        let single = seg_scores(&from_points(4, 4, &[(0, 0), (1, 0)]), &from_points(4, 4, &[(0, 0)])).unwrap();
        let agg = aggregate_seg(std::slice::from_ref(&single)).unwrap();
        assert_eq!((agg.dsc, agg.jaccard, agg.hd95, agg.pro), (single.dsc, single.jaccard, Some(single.hd95), single.pro));
        let mut a = single.clone();
        a.dsc = 40.0;
        let mut b = single.clone();
        b.dsc = 60.0;
        assert_eq!(aggregate_seg(&[a, b]).unwrap().dsc, 50.0);
        assert!(aggregate_seg(&[]).is_err());
        // a small perfect case and a large half-covered case
        let small_gt = from_points(8, 8, &[(0, 0)]);
        let big_gt = BinaryMask::from_fn(8, 8, |x, _| x < 4);
        let big_pred = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        let s1 = seg_scores(&small_gt, &small_gt).unwrap();
        let s2 = seg_scores(&big_pred, &big_gt).unwrap();
        let agg = aggregate_seg(&[s1, s2]).unwrap();
        // macro: (100 + 2*16/48*100) / 2; pooled: 2*(1+16)/(2+48)
        assert!((agg.dsc - (100.0 + 100.0 * 32.0 / 48.0) / 2.0).abs() < 1e-9);
        assert!((agg.pooled_dsc - 100.0 * 34.0 / 50.0).abs() < 1e-9);
        assert_ne!(agg.dsc, agg.pooled_dsc);
    }

    #[test]
    fn flagged_cases_are_excluded() {
        let gt = from_points(4, 4, &[(1, 1)]);
        let ok = seg_scores(&gt, &gt).unwrap();
        let bad = seg_scores(&BinaryMask::empty(4, 4), &gt).unwrap();
        assert!(bad.hd95_sentinel);
        let agg = aggregate_seg(&[ok, bad]).unwrap();
        assert_eq!(agg.hd95, Some(0.0));
        assert_eq!(agg.hd95_flagged, 1);
    }
}
