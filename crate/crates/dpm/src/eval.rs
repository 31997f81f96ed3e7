//! Masked-subspace retrieval: the query's mask carves the comparison
//! subspace for both sides, gallery is ranked by cosine distance, and
//! CMC/mAP follow the standard same-id-same-camera exclusion rule.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DpmError;
use crate::hmg::MaskVariant;

const FEA_MAGIC: &[u8; 7] = b"DPMFEA1";

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub id: usize,
    pub camera: usize,
    pub feature: Vec<f32>,
    pub mask: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub entries: Vec<BankEntry>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Self {
        FeatureBank { dim, entries: Vec::new() }
    }

    pub fn push(&mut self, e: BankEntry) -> Result<(), DpmError> {
        if e.feature.len() != self.dim || e.mask.len() != self.dim {
            return Err(DpmError::shape(
                "feature_bank",
                format!("entry dims {}/{} vs bank {}", e.feature.len(), e.mask.len(), self.dim),
            ));
        }
        if e.feature.iter().chain(&e.mask).any(|v| !v.is_finite()) {
            return Err(DpmError::non_finite(format!("bank entry for id {}", e.id)));
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DpmError> {
        let mut f = fs::File::create(path)?;
        f.write_all(FEA_MAGIC)?;
        f.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        f.write_all(&(self.dim as u64).to_le_bytes())?;
        for e in &self.entries {
            f.write_all(&(e.id as u64).to_le_bytes())?;
            f.write_all(&(e.camera as u64).to_le_bytes())?;
            for v in e.feature.iter().chain(&e.mask) {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DpmError> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 7];
        f.read_exact(&mut magic)?;
        if &magic != FEA_MAGIC {
            return Err(DpmError::Format(format!("bad magic in {}", path.display())));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        let mut bank = FeatureBank::new(dim);
        let mut f32buf = [0u8; 4];
        for _ in 0..count {
            f.read_exact(&mut u64buf)?;
            let id = u64::from_le_bytes(u64buf) as usize;
            f.read_exact(&mut u64buf)?;
            let camera = u64::from_le_bytes(u64buf) as usize;
            let mut read_vec = |n: usize, f: &mut fs::File| -> Result<Vec<f32>, DpmError> {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    f.read_exact(&mut f32buf)?;
                    v.push(f32::from_le_bytes(f32buf));
                }
                Ok(v)
            };
            let feature = read_vec(dim, &mut f)?;
            let mask = read_vec(dim, &mut f)?;
            bank.push(BankEntry { id, camera, feature, mask })?;
        }
        Ok(bank)
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

/// Distance between a query row and a gallery row. There is no prototype at
/// test time, so the prototype-side variants P/Pn degrade to their
/// feature-side twins F/Fn: the query's mask is applied to both features.
pub fn masked_distance(q: &BankEntry, g: &BankEntry, variant: MaskVariant) -> Result<f64, DpmError> {
    if q.feature.len() != g.feature.len() || q.mask.len() != q.feature.len() {
        return Err(DpmError::shape(
            "masked_distance",
            format!("{} vs {}", q.feature.len(), g.feature.len()),
        ));
    }
    let apply = |f: &[f32]| -> Vec<f64> {
        let fv: Vec<f64> = f.iter().map(|v| *v as f64).collect();
        let fv = if variant.after_norm() {
            let n = fv.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            fv.iter().map(|v| v / n).collect()
        } else {
            fv
        };
        fv.iter().zip(&q.mask).map(|(v, m)| v * *m as f64).collect()
    };
    Ok(cosine_distance(&apply(&q.feature), &apply(&g.feature)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// CMC@1..CMC@max_rank.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries with zero valid gallery matches, dropped from the averages.
    pub excluded_queries: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Drop gallery entries sharing both id and camera with the query.
    pub exclude_same_camera: bool,
    pub max_rank: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { exclude_same_camera: true, max_rank: 10 }
    }
}

fn query_metrics(
    q: &BankEntry,
    gallery: &FeatureBank,
    variant: MaskVariant,
    opt: EvalOptions,
) -> Result<Option<(usize, f64)>, DpmError> {
    let mut ranked: Vec<(f64, usize, bool)> = Vec::with_capacity(gallery.entries.len());
    for (gi, g) in gallery.entries.iter().enumerate() {
        if opt.exclude_same_camera && g.id == q.id && g.camera == q.camera {
            continue;
        }
        ranked.push((masked_distance(q, g, variant)?, gi, g.id == q.id));
    }
    if !ranked.iter().any(|r| r.2) {
        return Ok(None);
    }
    // ties broken by gallery index for deterministic oracle equivalence
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut first_hit = usize::MAX;
    let (mut hits, mut ap) = (0usize, 0.0);
    for (rank0, r) in ranked.iter().enumerate() {
        if r.2 {
            if first_hit == usize::MAX {
                first_hit = rank0;
            }
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some((first_hit, ap / hits as f64)))
}

/// CMC/mAP over a query bank against a gallery bank. Parallel across
/// queries; thread count capped by the DPM_THREADS environment variable.
pub fn evaluate(
    query: &FeatureBank,
    gallery: &FeatureBank,
    variant: MaskVariant,
    opt: EvalOptions,
) -> Result<RetrievalResult, DpmError> {
    let threads = std::env::var("DPM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    evaluate_with_threads(query, gallery, variant, opt, threads)
}

pub fn evaluate_with_threads(
    query: &FeatureBank,
    gallery: &FeatureBank,
    variant: MaskVariant,
    opt: EvalOptions,
    threads: usize,
) -> Result<RetrievalResult, DpmError> {
    if query.dim != gallery.dim {
        return Err(DpmError::shape(
            "evaluate",
            format!("query dim {} vs gallery {}", query.dim, gallery.dim),
        ));
    }
    if opt.max_rank == 0 {
        return Err(DpmError::invalid("max_rank", "must be >= 1"));
    }
    let n = query.entries.len();
    let threads = threads.clamp(1, n.max(1));
    let mut per_query: Vec<Option<(usize, f64)>> = vec![None; n];
    if threads <= 1 {
        for (i, q) in query.entries.iter().enumerate() {
            per_query[i] = query_metrics(q, gallery, variant, opt)?;
        }
    } else {
        let chunk = n.div_ceil(threads);
        let results: Vec<Result<Vec<Option<(usize, f64)>>, DpmError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = query
                    .entries
                    .chunks(chunk)
                    .map(|qs| {
                        scope.spawn(move || {
                            qs.iter().map(|q| query_metrics(q, gallery, variant, opt)).collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
            });
        let mut i = 0;
        for r in results {
            for m in r? {
                per_query[i] = m;
                i += 1;
            }
        }
    }
    let mut cmc = vec![0.0; opt.max_rank];
    let (mut map, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for m in per_query {
        match m {
            Some((first_hit, ap)) => {
                used += 1;
                map += ap;
                for r in first_hit..opt.max_rank {
                    cmc[r] += 1.0;
                }
            }
            None => excluded += 1,
        }
    }
    if used == 0 {
        return Err(DpmError::invalid(
            "evaluate",
            "every query was excluded (no valid gallery matches)".to_string(),
        ));
    }
    for v in &mut cmc {
        *v /= used as f64;
    }
    Ok(RetrievalResult { cmc, map: map / used as f64, excluded_queries: excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: usize, camera: usize, feature: Vec<f32>) -> BankEntry {
        let mask = vec![1.0; feature.len()];
        BankEntry { id, camera, feature, mask }
    }

    fn bank(entries: Vec<BankEntry>) -> FeatureBank {
        let dim = entries[0].feature.len();
        let mut b = FeatureBank::new(dim);
        for e in entries {
            b.push(e).unwrap();
        }
        b
    }

    #[test]
    fn masked_distance_hand_example() {
        // f_q=[1,0], f_g=[1,1], M_q=[1,0]: masked gallery collapses onto the
        // query direction, distance 0
        let q = BankEntry { id: 0, camera: 0, feature: vec![1.0, 0.0], mask: vec![1.0, 0.0] };
        let g = entry(1, 0, vec![1.0, 1.0]);
        let d = masked_distance(&q, &g, MaskVariant::F).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn all_ones_mask_is_plain_cosine() {
        let q = entry(0, 0, vec![1.0, 2.0, -0.5]);
        let g = entry(1, 0, vec![0.3, -1.0, 0.8]);
        for variant in [MaskVariant::P, MaskVariant::F, MaskVariant::Pn, MaskVariant::Fn] {
            let d = masked_distance(&q, &g, variant).unwrap();
            let qa: Vec<f64> = q.feature.iter().map(|v| *v as f64).collect();
            let ga: Vec<f64> = g.feature.iter().map(|v| *v as f64).collect();
            assert!((d - cosine_distance(&qa, &ga)).abs() < 1e-9, "{variant:?}");
        }
    }

    #[test]
    fn self_match_distance_zero_every_variant() {
        let mut q = entry(0, 0, vec![0.4, -1.2, 2.0]);
        q.mask = vec![0.9, 0.2, 0.6];
        for variant in [MaskVariant::P, MaskVariant::F, MaskVariant::Pn, MaskVariant::Fn] {
            let d = masked_distance(&q, &q.clone(), variant).unwrap();
            assert!(d.abs() < 1e-9, "{variant:?}: {d}");
        }
    }

    #[test]
    fn perfect_retrieval_trivial_case() {
        let q = bank(vec![entry(0, 0, vec![1.0, 0.0])]);
        let g = bank(vec![entry(0, 1, vec![1.0, 0.0]), entry(1, 0, vec![0.0, 1.0])]);
        let r = evaluate(&q, &g, MaskVariant::Fn, EvalOptions::default()).unwrap();
        assert_eq!(r.cmc[0], 1.0);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.excluded_queries, 0);
    }

    #[test]
    fn ap_hand_example_five_sixths() {
        // relevant at ranks 1 and 3 of a 3-item gallery
        let q = bank(vec![entry(0, 0, vec![1.0, 0.0])]);
        let g = bank(vec![
            entry(0, 1, vec![1.0, 0.05]),
            entry(1, 0, vec![1.0, 0.2]),
            entry(0, 2, vec![1.0, 0.4]),
        ]);
        let r = evaluate(&q, &g, MaskVariant::Fn, EvalOptions::default()).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-9);
        assert_eq!(r.cmc[0], 1.0);
    }

    #[test]
    fn same_camera_same_id_excluded_from_gallery() {
        // the only same-camera copy is removed; remaining match is at rank 2
        let q = bank(vec![entry(0, 0, vec![1.0, 0.0])]);
        let g = bank(vec![
            entry(0, 0, vec![1.0, 0.0]),      // excluded by the rule
            entry(1, 1, vec![1.0, 0.1]),
            entry(0, 1, vec![1.0, 0.3]),
        ]);
        let r = evaluate(&q, &g, MaskVariant::Fn, EvalOptions::default()).unwrap();
        assert_eq!(r.cmc[0], 0.0);
        assert_eq!(r.cmc[1], 1.0);
        let r2 = evaluate(
            &q,
            &g,
            MaskVariant::Fn,
            EvalOptions { exclude_same_camera: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r2.cmc[0], 1.0);
    }

    #[test]
    fn queries_without_matches_are_counted_not_averaged() {
        let q = bank(vec![entry(0, 0, vec![1.0, 0.0]), entry(9, 0, vec![0.0, 1.0])]);
        let g = bank(vec![entry(0, 1, vec![1.0, 0.0]), entry(1, 0, vec![0.5, 0.5])]);
        let r = evaluate(&q, &g, MaskVariant::Fn, EvalOptions::default()).unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.map, 1.0);
    }

    fn oracle(
        query: &FeatureBank,
        gallery: &FeatureBank,
        variant: MaskVariant,
        opt: EvalOptions,
    ) -> (Vec<f64>, f64, usize) {
        // independent naive implementation: full distance matrix, then
        // textbook CMC/AP per query
        let mut cmc = vec![0.0; opt.max_rank];
        let (mut map, mut used, mut excluded) = (0.0, 0, 0);
        for q in &query.entries {
            let mut rows: Vec<(f64, usize, bool)> = gallery
                .entries
                .iter()
                .enumerate()
                .filter(|(_, g)| !(opt.exclude_same_camera && g.id == q.id && g.camera == q.camera))
                .map(|(gi, g)| (masked_distance(q, g, variant).unwrap(), gi, g.id == q.id))
                .collect();
            if !rows.iter().any(|r| r.2) {
                excluded += 1;
                continue;
            }
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let relevant: Vec<usize> =
                rows.iter().enumerate().filter(|(_, r)| r.2).map(|(i, _)| i).collect();
            for r in relevant[0]..opt.max_rank {
                cmc[r] += 1.0;
            }
            let ap: f64 = relevant
                .iter()
                .enumerate()
                .map(|(k, &rank0)| (k + 1) as f64 / (rank0 + 1) as f64)
                .sum::<f64>()
                / relevant.len() as f64;
            map += ap;
            used += 1;
        }
        for v in &mut cmc {
            *v /= used as f64;
        }
        (cmc, map / used as f64, excluded)
    }

    fn random_banks(rng: &mut impl Rng) -> (FeatureBank, FeatureBank) {
        let dim = rng.gen_range(2..6);
        let ids = rng.gen_range(2..6);
        let cams = rng.gen_range(2..4);
        let nq = rng.gen_range(1..8);
        let ng = rng.gen_range(5..=100);
        let mk = |rng: &mut dyn RngCore| -> BankEntry {
            BankEntry {
                id: rng.gen_range(0..ids),
                camera: rng.gen_range(0..cams),
                feature: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                mask: (0..dim).map(|_| rng.gen_range(0.05..0.95)).collect(),
            }
        };
        let mut q = FeatureBank::new(dim);
        let mut g = FeatureBank::new(dim);
        for _ in 0..nq {
            q.push(mk(rng)).unwrap();
        }
        for _ in 0..ng {
            g.push(mk(rng)).unwrap();
        }
        (q, g)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for _ in 0..60 {
            let (q, g) = random_banks(&mut rng);
            let opt = EvalOptions { exclude_same_camera: rng.gen(), max_rank: 10 };
            let got = evaluate_with_threads(&q, &g, MaskVariant::Fn, opt, 1);
            let Ok(got) = got else { continue };
            let (cmc, map, excluded) = oracle(&q, &g, MaskVariant::Fn, opt);
            assert_eq!(got.excluded_queries, excluded);
            assert!((got.map - map).abs() < 1e-12);
            for (a, b) in got.cmc.iter().zip(&cmc) {
                assert!((a - b).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked >= 50, "only {checked} instances exercised");
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (q, g) = random_banks(&mut rng);
        let opt = EvalOptions::default();
        let serial = evaluate_with_threads(&q, &g, MaskVariant::Fn, opt, 1).unwrap();
        for threads in [2, 3, 8] {
            let par = evaluate_with_threads(&q, &g, MaskVariant::Fn, opt, threads).unwrap();
            assert_eq!(serial.cmc, par.cmc);
            assert_eq!(serial.map, par.map);
            assert_eq!(serial.excluded_queries, par.excluded_queries);
        }
    }

    #[test]
    fn ranking_invariant_to_positive_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (q, g) = random_banks(&mut rng);
        let scale = |b: &FeatureBank, k: f32| -> FeatureBank {
            let mut out = FeatureBank::new(b.dim);
            for e in &b.entries {
                let mut e2 = e.clone();
                for v in &mut e2.feature {
                    *v *= k;
                }
                out.push(e2).unwrap();
            }
            out
        };
        let base = evaluate_with_threads(&q, &g, MaskVariant::Fn, EvalOptions::default(), 1).unwrap();
        let scaled = evaluate_with_threads(
            &scale(&q, 3.0),
            &scale(&g, 0.25),
            MaskVariant::Fn,
            EvalOptions::default(),
            1,
        )
        .unwrap();
        assert_eq!(base.cmc, scaled.cmc);
        assert!((base.map - scaled.map).abs() < 1e-12);
    }

    #[test]
    fn cmc_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let (q, g) = random_banks(&mut rng);
            let Ok(r) = evaluate_with_threads(&q, &g, MaskVariant::Fn, EvalOptions::default(), 1)
            else {
                continue;
            };
            assert!(r.map >= 0.0 && r.map <= 1.0);
            for w in r.cmc.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
            for v in &r.cmc {
                assert!(*v >= 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn bank_round_trip_and_bad_magic() {
        let mut b = FeatureBank::new(3);
        b.push(BankEntry { id: 4, camera: 1, feature: vec![0.1, -0.2, 0.3], mask: vec![0.5, 0.6, 0.7] })
            .unwrap();
        b.push(BankEntry { id: 7, camera: 0, feature: vec![1.0, 2.0, 3.0], mask: vec![0.9, 0.8, 0.1] })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        b.save(&path).unwrap();
        let back = FeatureBank::load(&path).unwrap();
        assert_eq!(b, back);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        let err = FeatureBank::load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn bank_rejects_non_finite_and_wrong_dims() {
        let mut b = FeatureBank::new(2);
        assert!(b.push(BankEntry { id: 0, camera: 0, feature: vec![1.0], mask: vec![1.0, 1.0] }).is_err());
        assert!(b
            .push(BankEntry { id: 0, camera: 0, feature: vec![f32::NAN, 0.0], mask: vec![1.0, 1.0] })
            .is_err());
    }
}
