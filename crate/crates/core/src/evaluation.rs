//! Unit-norm embeddings, Euclidean distance matrices, and the single-shot
//! CMC protocol over repeated random identity splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ReidDataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingModel;
use crate::tensor::{Scalar, Tensor};

/// Divides each row of `x: [B, D]` by its Euclidean norm.
pub fn normalize_embeddings<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::dim("normalize_embeddings", x.shape(), &[0, 0]));
    }
    let mut out = x.clone();
    let d = x.shape()[1];
    for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot normalise embedding row {i}: norm is {norm}"
            )));
        }
        for v in row.iter_mut() {
            *v = T::from_f64(v.to_f64() / norm);
        }
    }
    Ok(out)
}

/// Probe-by-gallery Euclidean distances with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Vec<f64>,
    probe_ids: Vec<usize>,
    gallery_ids: Vec<usize>,
}

impl DistanceMatrix {
    /// `values` is row-major `[probe_ids.len(), gallery_ids.len()]`.
    pub fn new(values: Vec<f64>, probe_ids: Vec<usize>, gallery_ids: Vec<usize>) -> Result<Self> {
        if values.len() != probe_ids.len() * gallery_ids.len() || gallery_ids.is_empty() {
            return Err(Error::dim(
                "distance matrix",
                &[values.len()],
                &[probe_ids.len(), gallery_ids.len()],
            ));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric(format!(
                "distance entry {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(DistanceMatrix {
            values,
            probe_ids,
            gallery_ids,
        })
    }

    pub fn num_probes(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn num_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn get(&self, probe: usize, gallery: usize) -> f64 {
        self.values[probe * self.num_gallery() + gallery]
    }

    pub fn row(&self, probe: usize) -> &[f64] {
        let g = self.num_gallery();
        &self.values[probe * g..(probe + 1) * g]
    }

    pub fn probe_ids(&self) -> &[usize] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[usize] {
        &self.gallery_ids
    }

    /// Applies `f` to every entry (e.g. a monotone transform).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.values.iter().map(|&v| f(v)).collect(),
            self.probe_ids.clone(),
            self.gallery_ids.clone(),
        )
    }

    /// Header `probe_id,<gallery ids...>`, one row per probe.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe_id");
        for g in &self.gallery_ids {
            s.push_str(&format!(",{g}"));
        }
        s.push('\n');
        for (p, id) in self.probe_ids.iter().enumerate() {
            s.push_str(&id.to_string());
            for v in self.row(p) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// `‖p_i − g_j‖₂` for every probe/gallery pair, accumulated in f64.
pub fn pairwise_distances<T: Scalar>(
    probe: &Tensor<T>,
    gallery: &Tensor<T>,
    probe_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<DistanceMatrix> {
    if probe.rank() != 2 || gallery.rank() != 2 || probe.shape()[1] != gallery.shape()[1] {
        return Err(Error::dim("pairwise_distances", probe.shape(), gallery.shape()));
    }
    if probe.rows() != probe_ids.len() || gallery.rows() != gallery_ids.len() {
        return Err(Error::dim(
            "pairwise_distances labels",
            &[probe_ids.len(), gallery_ids.len()],
            &[probe.rows(), gallery.rows()],
        ));
    }
    let mut values = Vec::with_capacity(probe.rows() * gallery.rows());
    for i in 0..probe.rows() {
        let p = probe.row(i);
        for j in 0..gallery.rows() {
            let g = gallery.row(j);
            let sq: f64 = p
                .iter()
                .zip(g)
                .map(|(a, b)| {
                    let d = a.to_f64() - b.to_f64();
                    d * d
                })
                .sum();
            values.push(sq.sqrt());
        }
    }
    DistanceMatrix::new(values, probe_ids.to_vec(), gallery_ids.to_vec())
}

/// Cumulative match curve. `rates[k - 1]` is the rank-k match rate; when
/// built from several splits `rates` is the per-rank mean and `stddev` the
/// per-rank population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct CMCurve {
    pub rates: Vec<f64>,
    pub stddev: Vec<f64>,
    pub num_probes: usize,
    pub split_rates: Vec<Vec<f64>>,
}

impl CMCurve {
    pub fn max_rank(&self) -> usize {
        self.rates.len()
    }

    /// Rank-`k` rate (1-based); ranks beyond the curve saturate.
    pub fn rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.rates[(k - 1).min(self.rates.len() - 1)]
    }

    pub fn num_splits(&self) -> usize {
        self.split_rates.len()
    }

    /// Mean and stddev over split curves.
    pub fn from_splits(splits: Vec<Vec<f64>>, num_probes: usize) -> Result<Self> {
        let Some(first) = splits.first() else {
            return Err(Error::Protocol("no splits to aggregate".into()));
        };
        let r = first.len();
        if splits.iter().any(|s| s.len() != r) {
            return Err(Error::contract("split curves differ in length"));
        }
        let n = splits.len() as f64;
        let rates: Vec<f64> = (0..r).map(|k| splits.iter().map(|s| s[k]).sum::<f64>() / n).collect();
        let stddev = (0..r)
            .map(|k| {
                let var = splits.iter().map(|s| (s[k] - rates[k]).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .collect();
        Ok(CMCurve {
            rates,
            stddev,
            num_probes,
            split_rates: splits,
        })
    }

    /// `rank,mean_rate,stddev` for ranks `1..=max_rank`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,mean_rate,stddev\n");
        for (k, (m, sd)) in self.rates.iter().zip(&self.stddev).enumerate() {
            s.push_str(&format!("{},{m:.6},{sd:.6}\n", k + 1));
        }
        s
    }
}

/// 0-based rank of probe `p`'s true match: the number of gallery entries
/// ordered before it (ascending distance, ties by gallery index).
pub fn match_rank(dist: &DistanceMatrix, p: usize) -> Result<usize> {
    let id = dist.probe_ids[p];
    let row = dist.row(p);
    let mut best: Option<usize> = None;
    for (j, &gid) in dist.gallery_ids.iter().enumerate() {
        if gid != id {
            continue;
        }
        let d = row[j];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v < d || (v == d && k < j))
            .count();
        best = Some(best.map_or(ahead, |b: usize| b.min(ahead)));
    }
    best.ok_or_else(|| {
        Error::Protocol(format!(
            "probe {p} has identity {id}, which is absent from the gallery"
        ))
    })
}

/// Single-shot CMC up to `max_rank` (ranks past the gallery size saturate).
pub fn cmc_single_shot(dist: &DistanceMatrix, max_rank: usize) -> Result<CMCurve> {
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be >= 1".into()));
    }
    if dist.num_probes() == 0 {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut hits = vec![0usize; max_rank];
    for p in 0..dist.num_probes() {
        let r = match_rank(dist, p)?;
        for h in hits.iter_mut().skip(r) {
            *h += 1;
        }
    }
    let n = dist.num_probes() as f64;
    let rates = hits.iter().map(|&h| h as f64 / n).collect();
    CMCurve::from_splits(vec![rates], dist.num_probes())
}

/// Repeated-split single-shot protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub num_splits: usize,
    /// Fraction of identities reserved for training in each split; the
    /// rest are tested. Use 0 for a dataset that is already held out.
    pub train_frac: f64,
    pub seed: u64,
    pub max_rank: usize,
    pub probe_camera: usize,
    pub gallery_camera: usize,
}

impl Protocol {
    /// Every identity is a test identity; splits differ in which image per
    /// camera is drawn.
    pub fn held_out(num_splits: usize, seed: u64) -> Self {
        Protocol {
            num_splits,
            train_frac: 0.0,
            seed,
            max_rank: 20,
            probe_camera: 0,
            gallery_camera: 1,
        }
    }

    /// 20 splits of 1260 identities into 1160 train and 100 test.
    pub fn cuhk03(seed: u64) -> Self {
        Protocol {
            num_splits: 20,
            train_frac: 1160.0 / 1260.0,
            ..Self::held_out(20, seed)
        }
    }

    /// Exchanges the probe and gallery cameras.
    pub fn swapped(mut self) -> Self {
        std::mem::swap(&mut self.probe_camera, &mut self.gallery_camera);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_splits == 0 {
            return Err(Error::Config("num_splits must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.train_frac) {
            return Err(Error::Config(format!(
                "train_frac must be in [0, 1), got {}",
                self.train_frac
            )));
        }
        if self.max_rank == 0 {
            return Err(Error::Config("max_rank must be >= 1".into()));
        }
        if self.probe_camera == self.gallery_camera {
            return Err(Error::Config("probe and gallery cameras must differ".into()));
        }
        Ok(())
    }

    /// Number of test identities per split for `n` identities.
    pub fn test_identities(&self, n: usize) -> usize {
        n - (self.train_frac * n as f64).round() as usize
    }
}

/// Test identities and record indices chosen for one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub test_ids: Vec<usize>,
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Deterministic split assignments for `dataset` under `protocol`.
pub fn make_splits(dataset: &ReidDataset, protocol: &Protocol) -> Result<Vec<Split>> {
    protocol.validate()?;
    if dataset.cameras().len() < 2 {
        return Err(Error::Protocol("dataset needs at least two camera views".into()));
    }
    let n = dataset.num_identities();
    let n_test = protocol.test_identities(n);
    if n_test < 2 {
        return Err(Error::Protocol(format!(
            "too few identities for the split: {n} identities leave {n_test} for testing"
        )));
    }
    let mut per_cam: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        per_cam.entry((r.identity, r.camera)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut splits = Vec::with_capacity(protocol.num_splits);
    for _ in 0..protocol.num_splits {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let mut test_ids = ids[..n_test].to_vec();
        test_ids.sort_unstable();
        let mut pick = |id: usize, cam: usize| -> Result<usize> {
            let imgs = per_cam.get(&(id, cam)).ok_or_else(|| {
                Error::Protocol(format!("identity {id} has no image from camera {cam}"))
            })?;
            Ok(imgs[rng.random_range(0..imgs.len())])
        };
        let mut probes = Vec::with_capacity(n_test);
        let mut gallery = Vec::with_capacity(n_test);
        for &id in &test_ids {
            probes.push(pick(id, protocol.probe_camera)?);
            gallery.push(pick(id, protocol.gallery_camera)?);
        }
        splits.push(Split {
            test_ids,
            probes,
            gallery,
        });
    }
    Ok(splits)
}

/// Runs the protocol with an arbitrary embedding function `[B, C, H, W] →
/// [B, D]`. Each image used by any split is embedded once.
pub fn evaluate_with(
    embed: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    dataset: &ReidDataset,
    protocol: &Protocol,
) -> Result<CMCurve> {
    let splits = make_splits(dataset, protocol)?;
    let mut used: Vec<usize> = splits
        .iter()
        .flat_map(|s| s.probes.iter().chain(&s.gallery).copied())
        .collect();
    used.sort_unstable();
    used.dedup();
    let emb = normalize_embeddings(&embed(&dataset.batch(&used)?)?)?;
    let slot: BTreeMap<usize, usize> = used.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let rows = |idx: &[usize]| emb.select_rows(&idx.iter().map(|i| slot[i]).collect::<Vec<_>>());
    let mut curves = Vec::with_capacity(splits.len());
    let mut num_probes = 0;
    for s in &splits {
        let dist = pairwise_distances(
            &rows(&s.probes)?,
            &rows(&s.gallery)?,
            &dataset.labels(&s.probes),
            &dataset.labels(&s.gallery),
        )?;
        let cmc = cmc_single_shot(&dist, protocol.max_rank)?;
        num_probes = cmc.num_probes;
        curves.push(cmc.rates);
    }
    CMCurve::from_splits(curves, num_probes)
}

/// Eval-mode embeddings from `model`, normalised, compared across cameras.
pub fn evaluate_splits(
    model: &EmbeddingModel<f32>,
    dataset: &ReidDataset,
    protocol: &Protocol,
) -> Result<CMCurve> {
    evaluate_with(|x| model.embed(x), dataset, protocol)
}

/// Nearest neighbour on flattened pixels: the no-learning baseline.
pub fn evaluate_raw_pixels(dataset: &ReidDataset, protocol: &Protocol) -> Result<CMCurve> {
    evaluate_with(
        |x| {
            let b = x.shape()[0];
            x.clone().reshape(&[b, x.len() / b])
        },
        dataset,
        protocol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 1.0]).unwrap();
        let n = normalize_embeddings(&x).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-12 && (n.data()[1] - 0.8).abs() < 1e-12);
        assert!(n.max_abs_diff(&normalize_embeddings(&n).unwrap()) < 1e-7);
        let z = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        match normalize_embeddings(&z) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("row 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distance_examples() {
        let p = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(pairwise_distances(&p, &g, &[0], &[0]).unwrap().get(0, 0), 5.0);
        let g3 = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            pairwise_distances(&p, &g3, &[0], &[0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn hand_computed_cmc() {
        let d = DistanceMatrix::new(
            vec![0.1, 0.2, 0.3, 0.3, 0.4, 0.6, 0.9, 0.8, 0.7],
            vec![0, 1, 2],
            vec![0, 1, 2],
        )
        .unwrap();
        let c = cmc_single_shot(&d, 3).unwrap();
        assert!((c.rank(1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.rank(2), 1.0);
        assert_eq!(c.rank(3), 1.0);
    }

    #[test]
    fn ties_go_to_lower_gallery_index() {
        let d = DistanceMatrix::new(vec![0.5, 0.5], vec![1], vec![0, 1]).unwrap();
        assert_eq!(match_rank(&d, 0).unwrap(), 1);
        let d = DistanceMatrix::new(vec![0.5, 0.5], vec![0], vec![0, 1]).unwrap();
        assert_eq!(match_rank(&d, 0).unwrap(), 0);
    }

    #[test]
    fn absent_identity_is_protocol_error() {
        let d = DistanceMatrix::new(vec![0.5, 0.5], vec![7], vec![0, 1]).unwrap();
        assert!(matches!(cmc_single_shot(&d, 2), Err(Error::Protocol(_))));
    }

    #[test]
    fn csv_header_and_ranks() {
        let d = DistanceMatrix::new(vec![0.0, 1.0, 1.0, 0.0], vec![0, 1], vec![0, 1]).unwrap();
        let csv = cmc_single_shot(&d, 4).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rank,mean_rate,stddev");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("4,1.000000"));
    }

    #[test]
    fn split_stats() {
        let c = CMCurve::from_splits(vec![vec![0.5, 1.0], vec![1.0, 1.0]], 2).unwrap();
        assert_eq!(c.rates, vec![0.75, 1.0]);
        assert_eq!(c.stddev, vec![0.25, 0.0]);
    }

    #[test]
    fn cuhk03_preset_counts() {
        let p = Protocol::cuhk03(0);
        assert_eq!(p.num_splits, 20);
        assert_eq!(p.test_identities(1260), 100);
    }
}
