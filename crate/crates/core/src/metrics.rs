//! Evaluation metrics: accuracy, BLEU-1, ROUGE-1, an exact-match METEOR,
//! box IoU and precision at an IoU threshold, plus the per-task scoring of
//! prediction files.
//!
//! Text is compared as lowercase whitespace-separated tokens. Caption metrics
//! of an empty candidate are 0.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact-match fraction after trimming and case folding.
pub fn accuracy<P: AsRef<str>, L: AsRef<str>>(predictions: &[P], labels: &[L]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| normalize_label(p.as_ref()) == normalize_label(l.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl CaptionPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidInput("caption pair needs at least one reference".into()));
        }
        Ok(Self { candidate, references })
    }

    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        Self::new(
            tokenize(candidate),
            references.iter().map(|r| tokenize(r.as_ref())).collect(),
        )
    }
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &HashMap<&str, usize>, b: &HashMap<&str, usize>) -> usize {
    a.iter().map(|(w, &n)| n.min(b.get(w).copied().unwrap_or(0))).sum()
}

/// Unigram precision with counts clipped by the largest count in any single
/// reference, times the brevity penalty against the reference whose length
/// is closest to the candidate (the shorter one on ties).
pub fn bleu1(pair: &CaptionPair) -> f64 {
    let c = pair.candidate.len();
    if c == 0 {
        return 0.0;
    }
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in &pair.references {
        for (w, n) in counts(r) {
            let e = max_ref.entry(w).or_insert(0);
            *e = (*e).max(n);
        }
    }
    let precision = overlap(&counts(&pair.candidate), &max_ref) as f64 / c as f64;
    let r = pair
        .references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    precision * bp
}

/// Best unigram F1 over the references.
pub fn rouge1(pair: &CaptionPair) -> f64 {
    if pair.candidate.is_empty() {
        return 0.0;
    }
    let cand = counts(&pair.candidate);
    pair.references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let hit = overlap(&cand, &counts(r)) as f64;
            if hit == 0.0 {
                return 0.0;
            }
            let p = hit / pair.candidate.len() as f64;
            let rec = hit / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max)
}

/// Exact-match alignment: candidate words left to right, each taking the
/// reference position right after the previous match when it fits, else the
/// earliest unused equal word. Returns `(matches, chunks)`.
fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<(usize, usize)> = None;
    let (mut matches, mut chunks) = (0, 0);
    for (i, w) in candidate.iter().enumerate() {
        let follow = prev
            .filter(|&(pi, _)| pi + 1 == i)
            .map(|(_, pj)| pj + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *w);
        let j = follow.or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *w));
        if let Some(j) = j {
            used[j] = true;
            matches += 1;
            let continues = prev.is_some_and(|(pi, pj)| pi + 1 == i && pj + 1 == j);
            if !continues {
                chunks += 1;
            }
            prev = Some((i, j));
        }
    }
    (matches, chunks)
}

/// METEOR restricted to exact matches: `F_mean = 10PR / (R + 9P)` scaled by
/// `1 − 0.5·(chunks / matches)³`, best over the references.
pub fn meteor_simplified(pair: &CaptionPair) -> f64 {
    if pair.candidate.is_empty() {
        return 0.0;
    }
    pair.references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let (m, chunks) = align(&pair.candidate, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / pair.candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            f_mean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidInput(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of prediction/ground-truth pairs with IoU at least `threshold`.
pub fn precision_at_iou(preds: &[BoundingBox], gts: &[BoundingBox], threshold: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted boxes for {} ground-truth boxes",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("precision of an empty set".into()));
    }
    let hits = preds.iter().zip(gts).filter(|(p, g)| iou(p, g) >= threshold).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// First `[x_min, y_min, x_max, y_max]` group of decimals in `text`.
pub fn parse_box(text: &str) -> Option<BoundingBox> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| {
        let num = r"\s*([-+]?(?:\d+\.?\d*|\.\d+))\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).expect("valid pattern")
    });
    let caps = re.captures(text)?;
    let v: Vec<f64> = (1..=4).map(|i| caps[i].parse().ok()).collect::<Option<_>>()?;
    BoundingBox::new(v[0], v[1], v[2], v[3]).ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Vqa,
    Ground,
    Caption,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "vqa" => Ok(Task::Vqa),
            "ground" => Ok(Task::Ground),
            "caption" => Ok(Task::Caption),
            other => Err(Error::InvalidInput(format!("unknown task {other:?}"))),
        }
    }
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: serde_json::Value,
    pub output: String,
}

/// One line of a ground-truth file; which field is needed depends on the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn id_key(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Scores predictions against ground truth matched by id. Every ground-truth
/// id needs exactly one prediction.
pub fn evaluate(task: Task, preds: &[Prediction], gts: &[GroundTruth]) -> Result<TaskReport> {
    let mut by_id: HashMap<String, &Prediction> = HashMap::new();
    for p in preds {
        if by_id.insert(id_key(&p.id), p).is_some() {
            return Err(Error::InvalidInput(format!("duplicate prediction id {}", p.id)));
        }
    }
    if gts.is_empty() {
        return Err(Error::InvalidInput("no ground-truth records".into()));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for gt in gts {
        let p = by_id
            .get(&id_key(&gt.id))
            .ok_or_else(|| Error::InvalidInput(format!("no prediction for id {}", gt.id)))?;
        pairs.push((*p, gt));
    }
    let missing = |what: &str, gt: &GroundTruth| Error::InvalidInput(format!("ground truth {} has no {what}", gt.id));
    let mut metrics = BTreeMap::new();
    match task {
        Task::Classify | Task::Vqa => {
            let mut outs = Vec::new();
            let mut labels = Vec::new();
            for (p, gt) in &pairs {
                outs.push(p.output.as_str());
                labels.push(gt.label.as_deref().ok_or_else(|| missing("label", gt))?);
            }
            metrics.insert("accuracy".into(), accuracy(&outs, &labels)?);
        }
        Task::Ground => {
            let mut hits = 0usize;
            let mut total_iou = 0.0;
            for (p, gt) in &pairs {
                let b = gt
                    .boxes
                    .as_ref()
                    .and_then(|b| b.first())
                    .ok_or_else(|| missing("boxes", gt))?;
                let truth = BoundingBox::new(b[0], b[1], b[2], b[3])?;
                // unparseable output counts as a miss
                let v = parse_box(&p.output).map_or(0.0, |pb| iou(&pb, &truth));
                total_iou += v;
                if v >= 0.5 {
                    hits += 1;
                }
            }
            let n = pairs.len() as f64;
            metrics.insert("precision@0.5".into(), hits as f64 / n);
            metrics.insert("mean_iou".into(), total_iou / n);
        }
        Task::Caption => {
            let (mut b, mut r, mut m) = (0.0, 0.0, 0.0);
            for (p, gt) in &pairs {
                let refs = gt.references.as_ref().ok_or_else(|| missing("references", gt))?;
                let pair = CaptionPair::from_text(&p.output, refs)?;
                b += bleu1(&pair);
                r += rouge1(&pair);
                m += meteor_simplified(&pair);
            }
            let n = pairs.len() as f64;
            metrics.insert("bleu1".into(), b / n);
            metrics.insert("rouge1".into(), r / n);
            metrics.insert("meteor_simplified".into(), m / n);
        }
    }
    Ok(TaskReport {
        task,
        count: pairs.len(),
        metrics,
    })
}

/// Hand-worked cases with closed-form expected scores.
pub mod fixtures {
    pub struct CaptionCase {
        pub candidate: &'static str,
        pub references: &'static [&'static str],
        pub bleu1: f64,
        pub rouge1: f64,
        pub meteor: f64,
    }

    pub struct IouCase {
        pub a: [f64; 4],
        pub b: [f64; 4],
        pub iou: f64,
    }

    pub fn caption_cases() -> Vec<CaptionCase> {
        let e = std::f64::consts::E;
        vec![
            // one chunk of three matches: penalty 0.5 / 27
            CaptionCase { candidate: "the cat sat", references: &["the cat sat"], bleu1: 1.0, rouge1: 1.0, meteor: 53.0 / 54.0 },
            CaptionCase { candidate: "a a a a", references: &["a b c d"], bleu1: 0.25, rouge1: 0.25, meteor: 0.125 },
            // P = 1, R = 1/2, F_mean = 10/19, penalty 1/16
            CaptionCase { candidate: "a b", references: &["a b c d"], bleu1: 1.0 / e, rouge1: 2.0 / 3.0, meteor: 75.0 / 152.0 },
            CaptionCase { candidate: "the mat sat on", references: &["sat on the mat"], bleu1: 1.0, rouge1: 1.0, meteor: 15.0 / 16.0 },
            CaptionCase { candidate: "x y", references: &["a b"], bleu1: 0.0, rouge1: 0.0, meteor: 0.0 },
            CaptionCase { candidate: "a b", references: &["c d", "a b"], bleu1: 1.0, rouge1: 1.0, meteor: 15.0 / 16.0 },
            CaptionCase { candidate: "the cat sat", references: &["the cat sat down"], bleu1: (-1.0f64 / 3.0).exp(), rouge1: 6.0 / 7.0, meteor: 265.0 / 351.0 },
            // clipping takes the largest count in any single reference
            CaptionCase { candidate: "a a b", references: &["a c c", "a a d"], bleu1: 2.0 / 3.0, rouge1: 2.0 / 3.0, meteor: 5.0 / 8.0 },
            CaptionCase { candidate: "", references: &["a b"], bleu1: 0.0, rouge1: 0.0, meteor: 0.0 },
        ]
    }

    pub fn iou_cases() -> Vec<IouCase> {
        vec![
            IouCase { a: [0.0, 0.0, 1.0, 1.0], b: [0.0, 0.0, 1.0, 1.0], iou: 1.0 },
            IouCase { a: [0.0, 0.0, 1.0, 1.0], b: [0.5, 0.0, 1.0, 1.0], iou: 0.5 },
            IouCase { a: [0.0, 0.0, 2.0, 2.0], b: [1.0, 1.0, 3.0, 3.0], iou: 1.0 / 7.0 },
            IouCase { a: [0.0, 0.0, 1.0, 1.0], b: [0.0, 0.0, 0.5, 0.5], iou: 0.25 },
            IouCase { a: [0.0, 0.0, 1.0, 1.0], b: [1.0, 0.0, 2.0, 1.0], iou: 0.0 },
            IouCase { a: [0.0, 0.0, 1.0, 1.0], b: [2.0, 2.0, 3.0, 3.0], iou: 0.0 },
            IouCase { a: [0.3, 0.3, 0.3, 0.3], b: [0.3, 0.3, 0.3, 0.3], iou: 0.0 },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(c: &str, refs: &[&str]) -> CaptionPair {
        CaptionPair::from_text(c, refs).unwrap()
    }

    #[test]
    fn fixtures_hold() {
        for c in fixtures::caption_cases() {
            let p = pair(c.candidate, c.references);
            assert!((bleu1(&p) - c.bleu1).abs() < 1e-12, "bleu1 {}", c.candidate);
            assert!((rouge1(&p) - c.rouge1).abs() < 1e-12, "rouge1 {}", c.candidate);
            assert!((meteor_simplified(&p) - c.meteor).abs() < 1e-12, "meteor {}", c.candidate);
        }
        for c in fixtures::iou_cases() {
            let a = BoundingBox::new(c.a[0], c.a[1], c.a[2], c.a[3]).unwrap();
            let b = BoundingBox::new(c.b[0], c.b[1], c.b[2], c.b[3]).unwrap();
            assert_eq!(iou(&a, &b), c.iou);
        }
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&["a", "b"], &["A ", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(), 0.75);
        assert!(accuracy(&["a"], &["a", "b"]).is_err());
        assert!(accuracy::<&str, &str>(&[], &[]).is_err());
    }

    #[test]
    fn bleu1_cases() {
        assert_eq!(bleu1(&pair("the cat sat", &["the cat sat"])), 1.0);
        assert_eq!(bleu1(&pair("a a a a", &["a b c d"])), 0.25);
        assert_eq!(bleu1(&pair("x y", &["a b"])), 0.0);
        assert_eq!(bleu1(&pair("", &["a b"])), 0.0);
        // short candidate: precision 1, penalty exp(1 − 4/2)
        let v = bleu1(&pair("a b", &["a b c d"]));
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        // closest reference length decides the penalty
        assert_eq!(bleu1(&pair("a b", &["a b c d", "a c"])), 1.0);
        assert!(CaptionPair::new(vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn rouge1_cases() {
        assert_eq!(rouge1(&pair("a b c", &["a b c"])), 1.0);
        assert_eq!(rouge1(&pair("a b", &["a c"])), 0.5);
        assert_eq!(rouge1(&pair("a b", &["c d"])), 0.0);
        // best over references
        assert_eq!(rouge1(&pair("a b", &["c d", "a b"])), 1.0);
    }

    #[test]
    fn meteor_cases() {
        assert_eq!(meteor_simplified(&pair("a b c d", &["a b c d"])), 1.0 - 0.5 / 64.0);
        assert_eq!(meteor_simplified(&pair("x y", &["a b"])), 0.0);
        let v = meteor_simplified(&pair("the cat sat", &["the cat sat down"]));
        assert!((v - 265.0 / 351.0).abs() < 1e-12);
        // two chunks: "sat on" / "the mat" swapped order
        let (m, chunks) = align(&tokenize("the mat sat on"), &tokenize("sat on the mat"));
        assert_eq!((m, chunks), (4, 2));
        let v = meteor_simplified(&pair("the mat sat on", &["sat on the mat"]));
        assert!((v - (1.0 - 0.5 * (0.5f64).powi(3))).abs() < 1e-12);
    }

    #[test]
    fn alignment_prefers_continuing_a_chunk() {
        // the second "a" continues the run after "b" rather than taking position 0
        let (m, chunks) = align(&tokenize("b a"), &tokenize("a b a"));
        assert_eq!((m, chunks), (2, 1));
    }

    #[test]
    fn iou_cases() {
        let unit = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let right = BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        let far = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        let point = BoundingBox::new(0.3, 0.3, 0.3, 0.3).unwrap();
        assert_eq!(iou(&unit, &unit), 1.0);
        assert_eq!(iou(&unit, &far), 0.0);
        assert_eq!(iou(&unit, &right), 0.5);
        assert_eq!(iou(&point, &point), 0.0);
        assert!(BoundingBox::new(1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn precision_cases() {
        let a = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b = BoundingBox::new(0.6, 0.6, 1.0, 1.0).unwrap();
        assert_eq!(precision_at_iou(&[a, a], &[a, a], 0.5).unwrap(), 1.0);
        assert_eq!(precision_at_iou(&[a, a], &[b, b], 0.5).unwrap(), 0.0);
        assert_eq!(precision_at_iou(&[a, a, b, b, b], &[a, a, a, a, a], 0.5).unwrap(), 0.4);
        assert!(precision_at_iou(&[a], &[], 0.5).is_err());
    }

    #[test]
    fn box_parsing() {
        let b = parse_box("the plane is at [0.1, 0.2,0.5 , 0.75] in the image").unwrap();
        assert_eq!(b, BoundingBox::new(0.1, 0.2, 0.5, 0.75).unwrap());
        assert_eq!(parse_box("[1,2] then [0, 0, 1, 1]").unwrap().x_max, 1.0);
        assert!(parse_box("no box").is_none());
        assert!(parse_box("[0.5, 0.5, 0.1, 0.1]").is_none());
    }

    #[test]
    fn task_scoring() {
        let preds: Vec<Prediction> = serde_json::from_str(
            r#"[{"id": 1, "output": "Yes"}, {"id": "2", "output": "no"}]"#,
        )
        .unwrap();
        let gts: Vec<GroundTruth> = serde_json::from_str(
            r#"[{"id": 1, "label": "yes"}, {"id": "2", "label": "yes"}]"#,
        )
        .unwrap();
        let r = evaluate(Task::Vqa, &preds, &gts).unwrap();
        assert_eq!(r.metrics["accuracy"], 0.5);

        let preds = vec![Prediction { id: 1.into(), output: "[0,0,1,1]".into() }];
        let gts = vec![GroundTruth { id: 1.into(), boxes: Some(vec![[0.0, 0.0, 1.0, 0.5]]), ..Default::default() }];
        let r = evaluate(Task::Ground, &preds, &gts).unwrap();
        assert_eq!(r.metrics["precision@0.5"], 1.0);
        assert_eq!(r.metrics["mean_iou"], 0.5);
        assert!(evaluate(Task::Caption, &preds, &gts).is_err());
        assert!("detect".parse::<Task>().is_err());
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    fn boxes() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| {
            BoundingBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn caption_metrics_in_unit_interval(c in words(), r1 in words(), r2 in words()) {
            let p = CaptionPair::new(c, vec![r1, r2]).unwrap();
            for v in [bleu1(&p), rouge1(&p), meteor_simplified(&p)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn identical_candidate_scores_one(c in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 1..8)) {
            let c: Vec<String> = c.into_iter().map(String::from).collect();
            let p = CaptionPair::new(c.clone(), vec![c]).unwrap();
            prop_assert_eq!(bleu1(&p), 1.0);
            prop_assert_eq!(rouge1(&p), 1.0);
        }

        #[test]
        fn reference_order_is_irrelevant(c in words(), r1 in words(), r2 in words()) {
            let p = CaptionPair::new(c.clone(), vec![r1.clone(), r2.clone()]).unwrap();
            let q = CaptionPair::new(c, vec![r2, r1]).unwrap();
            prop_assert_eq!(bleu1(&p), bleu1(&q));
            prop_assert_eq!(rouge1(&p), rouge1(&q));
        }

        #[test]
        fn iou_symmetric_and_scale_invariant(a in boxes(), b in boxes(), s in 0.1..10.0f64, t in -5.0..5.0f64) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            let map = |x: &BoundingBox| BoundingBox::new(s * x.x_min + t, s * x.y_min + t, s * x.x_max + t, s * x.y_max + t).unwrap();
            prop_assert!((iou(&map(&a), &map(&b)) - v).abs() < 1e-9);
        }
    }
}
