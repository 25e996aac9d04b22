//! Clustering metrics, the kNN latent probe and t-SNE plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    Ok(())
}

/// `K × L` counts with `K = max(pred) + 1` and `L = max(truth) + 1`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> Vec<Vec<u64>> {
    let k = pred.iter().max().map_or(0, |m| m + 1);
    let l = truth.iter().max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0u64; l]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[p][t] += 1;
    }
    m
}

/// Optimal one-to-one cluster-to-class matching; `None` marks clusters left
/// unmatched when there are more clusters than classes.
pub fn best_matching(confusion: &[Vec<u64>]) -> Vec<Option<usize>> {
    let k = confusion.len();
    let l = confusion.first().map_or(0, Vec::len);
    let size = k.max(l);
    if size == 0 {
        return Vec::new();
    }
    let mut weights = Matrix::new(size, size, 0i64);
    for (i, row) in confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            weights[(i, j)] = c as i64;
        }
    }
    let (_, assignment) = kuhn_munkres(&weights);
    assignment[..k].iter().map(|&j| (j < l).then_some(j)).collect()
}

fn matched_correct(confusion: &[Vec<u64>], matching: &[Option<usize>]) -> u64 {
    matching
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| confusion[i][j]))
        .sum()
}

/// Fraction correct under the best one-to-one relabeling of `pred`.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let confusion = confusion_matrix(pred, truth);
    let matching = best_matching(&confusion);
    Ok(matched_correct(&confusion, &matching) as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
/// Two single-cluster partitions count as identical (1.0).
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let confusion = confusion_matrix(pred, truth);
    let n = pred.len() as f64;
    let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..confusion[0].len()).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let (hp, ht) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    let mut mi = 0.0;
    for (i, row) in confusion.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    let denom = 0.5 * (hp + ht);
    if denom <= 0.0 {
        return Ok(1.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub acc: f64,
    pub nmi: f64,
    /// Images per predicted cluster.
    pub cluster_sizes: Vec<u64>,
    /// Rows are predicted clusters, columns true classes.
    pub confusion: Vec<Vec<u64>>,
    /// Class matched to each cluster.
    pub matching: Vec<Option<usize>>,
}

impl MetricReport {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        check_pair(pred, truth)?;
        let confusion = confusion_matrix(pred, truth);
        let matching = best_matching(&confusion);
        let acc = matched_correct(&confusion, &matching) as f64 / pred.len() as f64;
        Ok(Self {
            n: pred.len(),
            acc,
            nmi: nmi(pred, truth)?,
            cluster_sizes: confusion.iter().map(|r| r.iter().sum()).collect(),
            confusion,
            matching,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub k: usize,
    pub accuracy: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean kNN majority vote for each `k`. Vote ties go to the tied label
/// whose member is nearest; distance ties go to the lower training index.
pub fn knn_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    ks: &[usize],
) -> Result<Vec<KnnResult>> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::InvalidArgument("latents and labels differ in length".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > train.len()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            train.len()
        )));
    }
    let classes = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let mut correct = vec![0usize; ks.len()];
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for (x, &label) in test.iter().zip(test_labels) {
        order.clear();
        order.extend(train.iter().enumerate().map(|(i, t)| (squared_distance(x, t), i)));
        order.select_nth_unstable_by(max_k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order[..max_k].sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &k) in ks.iter().enumerate() {
            let mut votes = vec![0usize; classes];
            for &(_, i) in &order[..k] {
                votes[train_labels[i]] += 1;
            }
            let best = *votes.iter().max().expect("at least one class");
            let winner = order[..k]
                .iter()
                .map(|&(_, i)| train_labels[i])
                .find(|&l| votes[l] == best)
                .expect("some neighbor holds the top vote");
            correct[slot] += usize::from(winner == label);
        }
    }
    Ok(ks
        .iter()
        .zip(correct)
        .map(|(&k, c)| KnnResult {
            k,
            accuracy: c as f64 / test.len() as f64,
        })
        .collect())
}

/// Deterministic train/test split for datasets without one: every fifth
/// image (index ≡ 4 mod 5) is held out.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 5 != 4)
}

/// kNN accuracy on latents and on raw pixels over the [`holdout_split`] of
/// the same images. Values of `k` beyond the training part are dropped.
pub fn latent_vs_raw_knn(
    latents: &[Vec<f64>],
    raw: &[Vec<f64>],
    labels: &[usize],
    ks: &[usize],
) -> Result<[(&'static str, Vec<KnnResult>); 2]> {
    if latents.len() != raw.len() || raw.len() != labels.len() {
        return Err(Error::InvalidArgument("latents, pixels and labels differ in length".into()));
    }
    let (train, test) = holdout_split(labels.len());
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k <= train.len()).collect();
    if ks.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable k for {} training points", train.len())));
    }
    let pick = |rows: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let (train_labels, test_labels) = (pick_labels(labels, &train), pick_labels(labels, &test));
    let probe = |rows: &[Vec<f64>]| knn_probe(&pick(rows, &train), &train_labels, &pick(rows, &test), &test_labels, &ks);
    Ok([("latent", probe(latents)?), ("raw", probe(raw)?)])
}

fn pick_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Marks the points whose cluster is not matched to their true class.
pub fn misclustered(pred: &[usize], truth: &[usize]) -> Result<Vec<bool>> {
    let report = MetricReport::new(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| report.matching[p] != Some(t))
        .collect())
}

/// A delimited table with one row per representation and one column per `k`.
pub fn knn_table_csv(rows: &[(&str, Vec<KnnResult>)]) -> String {
    let mut out = String::from("representation");
    if let Some((_, first)) = rows.first() {
        for r in first {
            let _ = write!(out, ",k={}", r.k);
        }
    }
    out.push('\n');
    for (name, results) in rows {
        out.push_str(name);
        for r in results {
            let _ = write!(out, ",{:.6}", r.accuracy);
        }
        out.push('\n');
    }
    out
}

/// Two-dimensional t-SNE coordinates, one per row of `latents`.
///
/// The optimizer starts from a seeded Gaussian layout and runs on a single
/// thread, so equal inputs and seed give equal coordinates. Fewer than four
/// points are laid out on a line.
pub fn tsne_embed(latents: &[Vec<f64>], seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::InvalidArgument("t-SNE needs at least two points".into()));
    }
    if n < 4 {
        return Ok((0..n).map(|i| [i as f64, 0.0]).collect());
    }
    let perplexity = (((n - 1) / 3) as f64).min(30.0);
    let init: Vec<f64> = rng::normal_vec(&mut rng::stream(seed, "tsne-init", 0), 2 * n)
        .into_iter()
        .map(|v| 1e-4 * v)
        .collect();
    let rows: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let flat = pool.install(|| {
        let mut tsne: bhtsne::tSNE<f64, &[f64]> = bhtsne::tSNE::new(&rows);
        tsne.perplexity(perplexity)
            .epochs(1000)
            .initial_embedding(init)
            .exact(|a, b| squared_distance(a, b));
        tsne.embedding()
    });
    Ok(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
}

/// Paths written by [`tsne_plot`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub image: PathBuf,
    /// The plotted data record: `x,y,label,highlight`.
    pub data: PathBuf,
    pub coords: Vec<[f64; 2]>,
}

/// Scatter of the t-SNE embedding coloured by label, with highlighted points
/// overlaid in red. Writes the PNG at `path` and the data record next to it.
pub fn tsne_plot(latents: &[Vec<f64>], labels: &[usize], highlight: Option<&[bool]>, path: &Path, seed: u64) -> Result<PlotOutput> {
    if labels.len() != latents.len() || highlight.is_some_and(|h| h.len() != latents.len()) {
        return Err(Error::InvalidArgument("labels and mask must match the number of points".into()));
    }
    let coords = tsne_embed(latents, seed)?;
    let data_path = path.with_extension("csv");
    let mut csv = String::from("x,y,label,highlight\n");
    for (i, c) in coords.iter().enumerate() {
        let h = highlight.is_some_and(|m| m[i]);
        let _ = writeln!(csv, "{},{},{},{}", c[0], c[1], labels[i], u8::from(h));
    }
    std::fs::write(&data_path, csv).map_err(|e| Error::io(&data_path, e))?;
    draw_scatter(&coords, labels, highlight, path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(PlotOutput {
        image: path.to_path_buf(),
        data: data_path,
        coords,
    })
}

fn draw_scatter(
    coords: &[[f64; 2]],
    labels: &[usize],
    highlight: Option<&[bool]>,
    path: &Path,
) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = BitMapBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE)?;
    let span = |axis: usize| {
        let (lo, hi) = coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[axis]), hi.max(c[axis])));
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad)..(hi + pad)
    };
    let mut chart = ChartBuilder::on(&root).margin(10).build_cartesian_2d(span(0), span(1))?;
    let mut by_label: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (c, &l) in coords.iter().zip(labels) {
        by_label.entry(l).or_default().push((c[0], c[1]));
    }
    for (l, points) in by_label {
        // Skip pure red so highlighted points stay distinguishable.
        let colour = Palette99::pick(l + 1).mix(0.7);
        chart.draw_series(points.into_iter().map(|p| Circle::new(p, 3, colour.filled())))?;
    }
    if let Some(mask) = highlight {
        let red = coords.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| (c[0], c[1]));
        chart.draw_series(red.map(|p| Cross::new(p, 4, RED.stroke_width(2))))?;
    }
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    /// Best accuracy over every injective relabeling of clusters onto classes.
    fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
        let k = pred.iter().max().unwrap() + 1;
        let l = truth.iter().max().unwrap() + 1;
        let size = k.max(l);
        permutations(size)
            .into_iter()
            .map(|perm| pred.iter().zip(truth).filter(|&(&p, &t)| perm[p] == t).count())
            .max()
            .unwrap() as f64
            / pred.len() as f64
    }

    #[test]
    fn latent_vs_raw_uses_the_holdout_and_drops_oversized_k() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let raw: Vec<Vec<f64>> = labels.iter().map(|&l| vec![l as f64]).collect();
        let latents: Vec<Vec<f64>> = labels.iter().map(|&l| vec![1.0 - l as f64, 0.0]).collect();
        let [(a, lat), (b, pix)] = latent_vs_raw_knn(&latents, &raw, &labels, &[1, 3, 9]).unwrap();
        assert_eq!((a, b), ("latent", "raw"));
        // 8 training points, so k = 9 is dropped.
        assert_eq!(lat.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 3]);
        assert!(lat.iter().chain(&pix).all(|r| r.accuracy == 1.0));
        assert!(latent_vs_raw_knn(&latents, &raw, &labels, &[20]).is_err());
        assert!(latent_vs_raw_knn(&latents[..3], &raw, &labels, &[1]).is_err());
    }

    #[test]
    fn misclustered_follows_the_matching() {
        let pred = [1, 1, 1, 0, 0, 1];
        let truth = [0, 0, 0, 1, 1, 1];
        assert_eq!(misclustered(&pred, &truth).unwrap(), vec![false, false, false, false, false, true]);
    }

    #[test]
    fn accuracy_examples() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(clustering_accuracy(&[2, 2, 0, 0, 1, 1], &truth).unwrap(), 1.0);
        assert_eq!(clustering_accuracy(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(clustering_accuracy(&[], &[]).is_err());
        assert!(clustering_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn accuracy_matches_permutation_search() {
        let mut r = rng::stream(3, "acc", 0);
        let truth: Vec<usize> = (0..30).map(|_| r.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..30).map(|_| r.random_range(0..3)).collect();
        assert_eq!(clustering_accuracy(&pred, &truth).unwrap(), brute_force_accuracy(&pred, &truth));
    }

    /// NMI straight from the contingency table definition.
    fn nmi_oracle(pred: &[usize], truth: &[usize]) -> f64 {
        let n = pred.len() as f64;
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut a: BTreeMap<usize, f64> = BTreeMap::new();
        let mut b: BTreeMap<usize, f64> = BTreeMap::new();
        for (&p, &t) in pred.iter().zip(truth) {
            *joint.entry((p, t)).or_default() += 1.0;
            *a.entry(p).or_default() += 1.0;
            *b.entry(t).or_default() += 1.0;
        }
        let h = |m: &BTreeMap<usize, f64>| -m.values().map(|c| c / n * (c / n).ln()).sum::<f64>();
        let mi: f64 = joint.iter().map(|(&(p, t), &c)| c / n * ((c / n) / ((a[&p] / n) * (b[&t] / n))).ln()).sum();
        mi / (0.5 * (h(&a) + h(&b)))
    }

    #[test]
    fn nmi_examples() {
        let truth = [0, 1, 2, 0, 1, 2];
        assert!((nmi(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0; 6], &truth).unwrap(), 0.0);
        let mut r = rng::stream(4, "nmi", 0);
        let t: Vec<usize> = (0..40).map(|_| r.random_range(0..4)).collect();
        let p: Vec<usize> = (0..40).map(|_| r.random_range(0..3)).collect();
        approx::assert_relative_eq!(nmi(&p, &t).unwrap(), nmi_oracle(&p, &t), max_relative = 1e-12);
    }

    #[test]
    fn report_is_self_consistent() {
        let pred = [0, 0, 1, 1, 1, 2];
        let truth = [1, 1, 0, 0, 2, 2];
        let r = MetricReport::new(&pred, &truth).unwrap();
        assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 6);
        assert_eq!(r.cluster_sizes, vec![2, 3, 1]);
        let correct: u64 = r.matching.iter().enumerate().filter_map(|(i, m)| m.map(|j| r.confusion[i][j])).sum();
        assert_eq!(r.acc, correct as f64 / 6.0);
        assert_eq!(r.acc, 5.0 / 6.0);
    }

    #[test]
    fn knn_examples() {
        let train = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.5, 0.0]];
        let labels = [0, 1, 0];
        let res = knn_probe(&train, &labels, &[vec![10.0, 0.0]], &[1], &[1]).unwrap();
        assert_eq!(res[0].accuracy, 1.0);
        assert!(knn_probe(&train, &labels, &[vec![0.0, 0.0]], &[0], &[4]).is_err());
        // Two votes each: the nearest neighbor's label wins.
        let train = vec![vec![1.0], vec![-1.5], vec![2.0], vec![-2.5]];
        let res = knn_probe(&train, &[0, 1, 0, 1], &[vec![0.0]], &[0], &[4]).unwrap();
        assert_eq!(res[0].accuracy, 1.0);
    }

    #[test]
    fn knn_separated_clusters() {
        let mut r = rng::stream(5, "knn", 0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let centre = if c == 0 { -20.0 } else { 20.0 };
            pts.push(vec![centre + rng::normal_vec(&mut r, 1)[0], rng::normal_vec(&mut r, 1)[0]]);
            labels.push(c);
        }
        let res = knn_probe(&pts[..40], &labels[..40], &pts[40..], &labels[40..], &[3]).unwrap();
        assert_eq!(res[0].accuracy, 1.0);
    }

    /// Majority vote over an explicitly sorted full distance list.
    fn knn_oracle(train: &[Vec<f64>], tl: &[usize], x: &[f64], k: usize) -> usize {
        let mut d: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, t)| (t.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut votes = BTreeMap::new();
        for &(_, i) in &d[..k] {
            *votes.entry(tl[i]).or_insert(0) += 1;
        }
        let best = *votes.values().max().unwrap();
        d[..k].iter().map(|&(_, i)| tl[i]).find(|l| votes[l] == best).unwrap()
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut r = rng::stream(6, "knn-oracle", 0);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| rng::normal_vec(&mut r, 3)).collect();
        let labels: Vec<usize> = (0..50).map(|_| r.random_range(0..3)).collect();
        let (train, test) = (&pts[..40], &pts[40..]);
        let expected = test
            .iter()
            .zip(&labels[40..])
            .filter(|(x, &l)| knn_oracle(train, &labels[..40], x, 5) == l)
            .count() as f64
            / 10.0;
        let got = knn_probe(train, &labels[..40], test, &labels[40..], &[5]).unwrap();
        assert_eq!(got[0].accuracy, expected);
    }

    #[test]
    fn knn_table_layout() {
        let rows = [("raw", vec![KnnResult { k: 3, accuracy: 0.5 }]), ("latent", vec![KnnResult { k: 3, accuracy: 1.0 }])];
        assert_eq!(knn_table_csv(&rows), "representation,k=3\nraw,0.500000\nlatent,1.000000\n");
    }

    #[test]
    fn tsne_plot_smoke_determinism_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let two = tsne_plot(&[vec![0.0], vec![1.0]], &[0, 1], None, &dir.path().join("two.png"), 0).unwrap();
        assert!(std::fs::metadata(&two.image).unwrap().len() > 0);

        let mut r = rng::stream(7, "tsne", 0);
        let pts: Vec<Vec<f64>> = (0..30).map(|i| {
            let mut v = rng::normal_vec(&mut r, 4);
            v[0] += 8.0 * (i % 3) as f64;
            v
        }).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mask: Vec<bool> = (0..30).map(|i| i % 7 == 0).collect();
        let a = tsne_plot(&pts, &labels, Some(&mask), &dir.path().join("a.png"), 5).unwrap();
        let b = tsne_plot(&pts, &labels, Some(&mask), &dir.path().join("b.png"), 5).unwrap();
        assert_eq!(a.coords, b.coords);
        let record = std::fs::read_to_string(&a.data).unwrap();
        assert_eq!(record, std::fs::read_to_string(&b.data).unwrap());
        let red = record.lines().skip(1).filter(|l| l.ends_with(",1")).count();
        assert_eq!(red, mask.iter().filter(|&&m| m).count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accuracy_matches_exhaustive_search_on_small_instances(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..=8)
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            prop_assert_eq!(clustering_accuracy(&pred, &truth).unwrap(), brute_force_accuracy(&pred, &truth));
        }

        #[test]
        fn metrics_ignore_relabeling(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
            seed in 0u64..1000,
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let perms = permutations(4);
            let mut r = rng::stream(seed, "relabel", 0);
            let pp = &perms[r.random_range(0..perms.len())];
            let pt = &perms[r.random_range(0..perms.len())];
            let pred2: Vec<usize> = pred.iter().map(|&p| pp[p]).collect();
            let truth2: Vec<usize> = truth.iter().map(|&t| pt[t]).collect();
            prop_assert_eq!(clustering_accuracy(&pred, &truth).unwrap(), clustering_accuracy(&pred2, &truth2).unwrap());
            prop_assert!((nmi(&pred, &truth).unwrap() - nmi(&pred2, &truth2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn knn_is_rotation_invariant(angle in 0.0f64..std::f64::consts::TAU, seed in 0u64..1000) {
            let mut r = rng::stream(seed, "rot", 0);
            let pts: Vec<Vec<f64>> = (0..30).map(|_| rng::normal_vec(&mut r, 2)).collect();
            let labels: Vec<usize> = (0..30).map(|_| r.random_range(0..2)).collect();
            let (c, s) = (angle.cos(), angle.sin());
            let rot: Vec<Vec<f64>> = pts.iter().map(|p| vec![c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
            let ks = [1, 3, 7, 20];
            let a = knn_probe(&pts[..20], &labels[..20], &pts[20..], &labels[20..], &ks).unwrap();
            let b = knn_probe(&rot[..20], &labels[..20], &rot[20..], &labels[20..], &ks).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.accuracy - y.accuracy).abs() < 1e-9);
            }
        }
    }
}
