//! Cosine top-k retrieval and paired image/text metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

pub const DEFAULT_KS: [usize; 2] = [1, 5];

fn unit_rows(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    let (r, c) = t.as_matrix()?;
    let mut out = t.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(
            n > 0.0 && n.is_finite(),
            Numeric,
            "{what} row {i} has zero or non-finite norm"
        );
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// `[Q × G]` cosine similarities.
pub fn cosine_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    ensure!(
        queries.cols() == gallery.cols(),
        Dimension,
        "query and gallery widths differ"
    );
    let q = Tensor::new(queries.shape().to_vec(), unit_rows(queries, "query")?)?;
    let g = Tensor::new(gallery.shape().to_vec(), unit_rows(gallery, "gallery")?)?;
    let (gr, gc) = g.as_matrix()?;
    let mut gt = vec![0.0; gr * gc];
    for i in 0..gr {
        for j in 0..gc {
            gt[j * gr + i] = g.data()[i * gc + j];
        }
    }
    q.matmul(&Tensor::new(vec![gc, gr], gt)?)
}

/// Indices of the `k` most similar gallery rows per query, best first; ties go to the lower index.
pub fn topk_retrieve(queries: &Tensor, gallery: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let g = gallery.rows();
    ensure!(k >= 1 && k <= g, Usage, "k = {k} must lie in [1, {g}]");
    let sims = cosine_matrix(queries, gallery)?;
    Ok((0..sims.rows())
        .map(|i| {
            let row = sims.row(i);
            let mut idx: Vec<usize> = (0..g).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Fraction of queries `i` whose target `targets[i]` appears among the top `k`.
fn hit_rate(
    queries: &Tensor,
    gallery: &Tensor,
    targets: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let top = topk_retrieve(queries, gallery, kmax)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = top
                .iter()
                .zip(targets)
                .filter(|(t, &y)| t[..k].contains(&y))
                .count();
            hits as f64 / targets.len().max(1) as f64
        })
        .collect())
}

/// Caption-to-caption top-1: query `i` should retrieve gallery row `i`.
pub fn caption2caption_top1(queries: &Tensor, gallery: &Tensor) -> Result<f64> {
    ensure!(
        queries.rows() == gallery.rows(),
        Usage,
        "query and gallery counts differ"
    );
    let targets: Vec<usize> = (0..queries.rows()).collect();
    Ok(hit_rate(queries, gallery, &targets, &[1])?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub ks: Vec<usize>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

impl TaskResult {
    pub fn top1_i2t(&self) -> f64 {
        self.at(&self.i2t, 1)
    }

    pub fn top1_t2i(&self) -> f64 {
        self.at(&self.t2i, 1)
    }

    fn at(&self, v: &[f64], k: usize) -> f64 {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| v[i])
            .unwrap_or(f64::NAN)
    }
}

/// Image-to-text and text-to-image top-k where row `i` of each set is the matching pair.
pub fn evaluate_pair_retrieval(
    task: &str,
    img: &Tensor,
    txt: &Tensor,
    ks: &[usize],
) -> Result<TaskResult> {
    ensure!(
        img.rows() == txt.rows(),
        Usage,
        "{} images but {} texts",
        img.rows(),
        txt.rows()
    );
    ensure!(!ks.is_empty(), Usage, "no k values given");
    let targets: Vec<usize> = (0..img.rows()).collect();
    Ok(TaskResult {
        task: task.to_string(),
        ks: ks.to_vec(),
        i2t: hit_rate(img, txt, &targets, ks)?,
        t2i: hit_rate(txt, img, &targets, ks)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub tasks: Vec<TaskResult>,
    pub mean_i2t: f64,
    pub mean_t2i: f64,
}

impl RetrievalReport {
    /// Collects tasks; the means are over each task's top-1 accuracy.
    pub fn new(tasks: Vec<TaskResult>) -> Self {
        let n = tasks.len().max(1) as f64;
        let mean_i2t = tasks.iter().map(|t| t.top1_i2t()).sum::<f64>() / n;
        let mean_t2i = tasks.iter().map(|t| t.top1_t2i()).sum::<f64>() / n;
        Self {
            tasks,
            mean_i2t,
            mean_t2i,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Mean of the I2T and T2I averages.
    pub fn average(&self) -> f64 {
        (self.mean_i2t + self.mean_t2i) / 2.0
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>4} {:>8} {:>8}", "task", "k", "i2t", "t2i");
        for t in &self.tasks {
            for (i, k) in t.ks.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:<16} {:>4} {:>8.4} {:>8.4}",
                    t.task, k, t.i2t[i], t.t2i[i]
                );
            }
        }
        let _ = writeln!(
            s,
            "{:<16} {:>4} {:>8.4} {:>8.4}",
            "mean", 1, self.mean_i2t, self.mean_t2i
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_retrieval() {
        let x = Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, -0.5]]).unwrap();
        let top = topk_retrieve(&x, &x, 1).unwrap();
        assert_eq!(top, vec![vec![0], vec![1], vec![2]]);
        let r = evaluate_pair_retrieval("t", &x, &x, &[1]).unwrap();
        assert_eq!((r.i2t[0], r.t2i[0]), (1.0, 1.0));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        assert_eq!(topk_retrieve(&q, &g, 3).unwrap(), vec![vec![1, 2, 0]]);
    }

    #[test]
    fn errors() {
        let g = Tensor::eye(3);
        assert!(matches!(
            topk_retrieve(&g, &g, 4),
            Err(crate::Error::Usage(_))
        ));
        let q = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            topk_retrieve(&q, &g, 1),
            Err(crate::Error::Numeric(_))
        ));
        let two = Tensor::eye(2);
        assert!(evaluate_pair_retrieval("t", &g, &two, &[1]).is_err());
    }

    #[test]
    fn report_means() {
        let a = TaskResult {
            task: "short".into(),
            ks: vec![1, 5],
            i2t: vec![0.2, 0.5],
            t2i: vec![0.4, 0.6],
        };
        let b = TaskResult {
            task: "long".into(),
            ks: vec![1, 5],
            i2t: vec![0.6, 0.9],
            t2i: vec![0.0, 0.1],
        };
        let r = RetrievalReport::new(vec![a, b]);
        assert!((r.mean_i2t - 0.4).abs() < 1e-15);
        assert!((r.mean_t2i - 0.2).abs() < 1e-15);
        assert!(r.to_table().contains("long"));
    }
}
