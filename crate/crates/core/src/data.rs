//! Question-answering sequences: the triple-line file format, seeded
//! splitting, k-fold partitioning, windowed mini-batching, and a synthetic
//! item-response generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed attempt: question id and binary correctness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub question: usize,
    pub correct: bool,
}

impl Interaction {
    pub fn new(question: usize, correct: bool) -> Self {
        Self { question, correct }
    }

    pub fn answer(&self) -> u8 {
        u8::from(self.correct)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub student_id: String,
    pub steps: Vec<Interaction>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive non-overlapping windows of at most `max_len` steps.
    pub fn windows(&self, max_len: usize) -> impl Iterator<Item = &[Interaction]> {
        self.steps.chunks(max_len.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_questions: usize,
    pub sequences: Vec<InteractionSequence>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_questions: usize, sequences: Vec<InteractionSequence>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_questions,
            sequences,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for seq in &self.sequences {
            if seq.steps.is_empty() {
                return Err(Error::Data(format!("sequence `{}` is empty", seq.student_id)));
            }
            if let Some(step) = seq.steps.iter().find(|s| s.question >= self.num_questions) {
                return Err(Error::Data(format!(
                    "sequence `{}` has question id {} but the dataset declares {} questions",
                    seq.student_id, step.question, self.num_questions
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(InteractionSequence::len).sum()
    }

    pub fn max_question_id(&self) -> Option<usize> {
        self.sequences.iter().flat_map(|s| s.steps.iter().map(|x| x.question)).max()
    }

    fn subset(&self, name: &str, sequences: Vec<InteractionSequence>) -> Self {
        Self {
            name: format!("{}/{}", self.name, name),
            num_questions: self.num_questions,
            sequences,
        }
    }
}

const QUESTIONS_HEADER: &str = "#questions=";

/// Parses the triple-line format: a count line, a comma-separated line of
/// question ids and a comma-separated line of 0/1 answers per student, with
/// an optional leading `#questions=<n>` header.
pub fn parse_triples(name: &str, text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();

    let mut declared = None;
    if let Some(&(line, first)) = lines.peek() {
        if let Some(rest) = first.strip_prefix(QUESTIONS_HEADER) {
            let n = rest.trim().parse::<usize>().map_err(|e| Error::Parse {
                line,
                message: format!("bad question count header: {e}"),
            })?;
            declared = Some(n);
            lines.next();
        }
    }

    let mut sequences = Vec::new();
    while let Some((count_line, count_text)) = lines.next() {
        let count = count_text.trim().parse::<usize>().map_err(|e| Error::Parse {
            line: count_line,
            message: format!("bad sequence length `{count_text}`: {e}"),
        })?;
        if count == 0 {
            return Err(Error::Parse {
                line: count_line,
                message: "sequence length must be positive".into(),
            });
        }
        let (q_line, q_text) = lines.next().ok_or_else(|| Error::Parse {
            line: count_line,
            message: "record truncated: missing question line".into(),
        })?;
        let (a_line, a_text) = lines.next().ok_or_else(|| Error::Parse {
            line: q_line,
            message: "record truncated: missing answer line".into(),
        })?;

        let questions = parse_list(q_line, q_text, |tok| {
            tok.parse::<usize>().map_err(|e| format!("bad question id `{tok}`: {e}"))
        })?;
        let answers = parse_list(a_line, a_text, |tok| match tok {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(format!("answer `{tok}` is not 0 or 1")),
        })?;
        if questions.len() != count {
            return Err(Error::Parse {
                line: q_line,
                message: format!("count line says {count} but {} question ids follow", questions.len()),
            });
        }
        if answers.len() != count {
            return Err(Error::Parse {
                line: a_line,
                message: format!("count line says {count} but {} answers follow", answers.len()),
            });
        }
        sequences.push(InteractionSequence {
            student_id: format!("s{}", sequences.len()),
            steps: questions
                .into_iter()
                .zip(answers)
                .map(|(q, y)| Interaction::new(q, y))
                .collect(),
        });
    }
    if sequences.is_empty() {
        return Err(Error::Data("no records found".into()));
    }

    let needed = sequences
        .iter()
        .flat_map(|s| s.steps.iter().map(|x| x.question + 1))
        .max()
        .unwrap_or(0);
    let num_questions = match declared {
        Some(n) if n < needed => {
            return Err(Error::Data(format!(
                "header declares {n} questions but ids reach {}",
                needed - 1
            )))
        }
        Some(n) => n,
        None => needed,
    };
    Dataset::new(name, num_questions, sequences)
}

fn parse_list<V>(line: usize, text: &str, f: impl Fn(&str) -> Result<V, String>) -> Result<Vec<V>> {
    text.split(',')
        .map(|tok| f(tok.trim()).map_err(|message| Error::Parse { line, message }))
        .collect()
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_triples(&name, &text)
}

/// Serializes in the triple-line format, always with the `#questions=` header.
pub fn to_triples(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{QUESTIONS_HEADER}{}", ds.num_questions);
    for seq in &ds.sequences {
        let qs: Vec<String> = seq.steps.iter().map(|s| s.question.to_string()).collect();
        let ys: Vec<&str> = seq.steps.iter().map(|s| if s.correct { "1" } else { "0" }).collect();
        let _ = writeln!(out, "{}", seq.steps.len());
        let _ = writeln!(out, "{}", qs.join(","));
        let _ = writeln!(out, "{}", ys.join(","));
    }
    out
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_triples(ds))?;
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded shuffle, then the first `ceil(fraction * n)` sequences train.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Data(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = ds.sequences.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} sequence(s)")));
    }
    let cut = ((train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let idx = shuffled_indices(n, seed);
    let pick = |ids: &[usize]| ids.iter().map(|&i| ds.sequences[i].clone()).collect();
    Ok((ds.subset("train", pick(&idx[..cut])), ds.subset("test", pick(&idx[cut..]))))
}

/// `k` (train, validation) pairs; fold sizes differ by at most one.
pub fn kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let n = ds.sequences.len();
    if k < 2 || k > n {
        return Err(Error::Data(format!("k = {k} must lie in [2, {n}]")));
    }
    let idx = shuffled_indices(n, seed);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for f in 0..k {
        bounds.push(bounds[f] + n / k + usize::from(f < n % k));
    }
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (bounds[f], bounds[f + 1]);
            let valid = idx[lo..hi].iter().map(|&i| ds.sequences[i].clone()).collect();
            let train = idx[..lo]
                .iter()
                .chain(&idx[hi..])
                .map(|&i| ds.sequences[i].clone())
                .collect();
            (
                ds.subset(&format!("fold{f}-train"), train),
                ds.subset(&format!("fold{f}-valid"), valid),
            )
        })
        .collect())
}

/// Padded `[batch, max_len]` block of windows. Row-major matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub batch_size: usize,
    pub max_len: usize,
    pub questions: Vec<usize>,
    pub answers: Vec<u8>,
    pub mask: Vec<u8>,
}

impl MiniBatch {
    pub fn from_windows(windows: &[&[Interaction]], max_len: usize) -> Self {
        let b = windows.len();
        let mut questions = vec![0; b * max_len];
        let mut answers = vec![0; b * max_len];
        let mut mask = vec![0; b * max_len];
        for (r, w) in windows.iter().enumerate() {
            for (t, step) in w.iter().take(max_len).enumerate() {
                questions[r * max_len + t] = step.question;
                answers[r * max_len + t] = step.answer();
                mask[r * max_len + t] = 1;
            }
        }
        Self {
            batch_size: b,
            max_len,
            questions,
            answers,
            mask,
        }
    }

    pub fn lane_len(&self, lane: usize) -> usize {
        self.mask[lane * self.max_len..(lane + 1) * self.max_len]
            .iter()
            .take_while(|&&m| m == 1)
            .count()
    }

    /// The observed steps of one lane.
    pub fn lane(&self, lane: usize) -> Vec<Interaction> {
        let base = lane * self.max_len;
        (0..self.lane_len(lane))
            .map(|t| Interaction::new(self.questions[base + t], self.answers[base + t] == 1))
            .collect()
    }

    pub fn num_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Chunks every sequence into windows of `max_len`, shuffles the windows
/// with `seed`, and groups them `batch_size` at a time.
pub fn batch(ds: &Dataset, batch_size: usize, max_len: usize, seed: u64) -> Result<Vec<MiniBatch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Data("batch size and window length must be positive".into()));
    }
    let mut windows: Vec<&[Interaction]> = ds.sequences.iter().flat_map(|s| s.windows(max_len)).collect();
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(windows
        .chunks(batch_size)
        .map(|chunk| MiniBatch::from_windows(chunk, max_len))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub learning_increment: f64,
}

impl SyntheticSpec {
    pub fn new(n_students: usize, n_questions: usize, n_concepts: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            n_students,
            n_questions,
            n_concepts,
            seq_len,
            seed,
            learning_increment: 0.1,
        }
    }
}

/// Generator ground truth, written next to synthetic data for test oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub question_concept: Vec<usize>,
    pub difficulty: Vec<f64>,
}

/// Item-response simulation: one concept per question, difficulties and
/// initial abilities standard normal, ability on a concept grows by the
/// learning increment after each attempt on it, and an answer is correct
/// with probability `sigmoid(ability - difficulty)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    let SyntheticSpec {
        n_students,
        n_questions,
        n_concepts,
        seq_len,
        seed,
        learning_increment,
    } = *spec;
    if n_students == 0 || n_questions == 0 || n_concepts == 0 || seq_len == 0 {
        return Err(Error::Data("synthetic sizes must be positive".into()));
    }
    if n_concepts > n_questions {
        return Err(Error::Data(format!(
            "{n_concepts} concepts cannot be spread over {n_questions} questions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // every concept owns at least one question
    let mut question_concept: Vec<usize> = (0..n_questions).map(|q| q % n_concepts).collect();
    question_concept.shuffle(&mut rng);
    let difficulty: Vec<f64> = (0..n_questions).map(|_| StandardNormal.sample(&mut rng)).collect();

    let sequences = (0..n_students)
        .map(|s| {
            let mut ability: Vec<f64> = (0..n_concepts).map(|_| StandardNormal.sample(&mut rng)).collect();
            let steps = (0..seq_len)
                .map(|_| {
                    let q = rng.random_range(0..n_questions);
                    let c = question_concept[q];
                    let p = 1.0 / (1.0 + (difficulty[q] - ability[c]).exp());
                    let correct = rng.random::<f64>() < p;
                    ability[c] += learning_increment;
                    Interaction::new(q, correct)
                })
                .collect();
            InteractionSequence {
                student_id: format!("s{s}"),
                steps,
            }
        })
        .collect();
    let ds = Dataset::new(format!("synthetic-{n_concepts}"), n_questions, sequences)?;
    Ok((
        ds,
        SyntheticTruth {
            spec: spec.clone(),
            question_concept,
            difficulty,
        },
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn seqs(n: usize) -> Dataset {
        let sequences = (0..n)
            .map(|i| InteractionSequence {
                student_id: format!("s{i}"),
                steps: vec![Interaction::new(i % 3, i % 2 == 0); 1 + i % 4],
            })
            .collect();
        Dataset::new("t", 3, sequences).unwrap()
    }

    #[test]
    fn parses_single_triple() {
        let ds = parse_triples("x", "3\n0,5,0\n1,0,1\n").unwrap();
        assert_eq!(ds.sequences.len(), 1);
        assert_eq!(
            ds.sequences[0].steps,
            vec![
                Interaction::new(0, true),
                Interaction::new(5, false),
                Interaction::new(0, true)
            ]
        );
        assert_eq!(ds.num_questions, 6);
    }

    #[test]
    fn count_mismatch_reports_line() {
        let err = parse_triples("x", "3\n0,1,2\n1,1,1\n2\n0,1,2\n1,0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_binary_answer_and_empty_input() {
        assert!(matches!(
            parse_triples("x", "2\n0,1\n1,2\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(parse_triples("x", "").is_err());
        assert!(parse_triples("x", "2\n0,1\n").is_err());
    }

    #[test]
    fn two_students_and_header() {
        let ds = parse_triples("x", "2\n0,4\n1,0\n1\n2\n1\n").unwrap();
        assert_eq!(ds.sequences.len(), 2);
        assert_eq!(ds.num_questions, 5);
        let ds = parse_triples("x", "#questions=9\n1\n2\n1\n").unwrap();
        assert_eq!(ds.num_questions, 9);
        assert!(parse_triples("x", "#questions=2\n1\n2\n1\n").is_err());
    }

    #[test]
    fn load_csv_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        fs::write(&p, "").unwrap();
        assert!(load_csv(&p).is_err());
    }

    #[test]
    fn split_sizes_use_ceiling() {
        let (tr, te) = split(&seqs(10), 0.7, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let (tr, te) = split(&seqs(3), 0.5, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 1));
        assert!(split(&seqs(1), 0.5, 1).is_err());
        assert!(split(&seqs(4), 1.0, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let ds = seqs(10);
        let a = split(&ds, 0.7, 42).unwrap();
        let b = split(&ds, 0.7, 42).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<String> = a.0.sequences.iter().chain(&a.1.sequences).map(|s| s.student_id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = ds.sequences.iter().map(|s| s.student_id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
    }

    #[test]
    fn kfold_partitions_evenly() {
        let ds = seqs(10);
        let folds = kfold(&ds, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = Vec::new();
        for (train, valid) in &folds {
            assert_eq!(valid.len(), 2);
            assert_eq!(train.len(), 8);
            seen.extend(valid.sequences.iter().map(|s| s.student_id.clone()));
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert!(kfold(&ds, 1, 0).is_err());
        assert!(kfold(&ds, 11, 0).is_err());
    }

    #[test]
    fn batching_windows_and_padding() {
        let steps: Vec<Interaction> = (0..5).map(|q| Interaction::new(q, q % 2 == 0)).collect();
        let ds = Dataset::new(
            "w",
            5,
            vec![InteractionSequence {
                student_id: "a".into(),
                steps: steps.clone(),
            }],
        )
        .unwrap();
        let batches = batch(&ds, 4, 3, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let mb = &batches[0];
        let mut lens: Vec<usize> = (0..mb.batch_size).map(|l| mb.lane_len(l)).collect();
        lens.sort();
        assert_eq!(lens, vec![2, 3]);
        assert_eq!(mb.num_observed(), 5);

        let ds3 = Dataset::new(
            "w",
            5,
            vec![InteractionSequence {
                student_id: "a".into(),
                steps,
            }; 3],
        )
        .unwrap();
        let batches = batch(&ds3, 2, 5, 0).unwrap();
        assert_eq!(batches.iter().map(|b| b.batch_size).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn synthetic_is_deterministic_and_validates() {
        let spec = SyntheticSpec::new(30, 10, 3, 20, 5);
        let (a, ta) = generate_synthetic(&spec).unwrap();
        let (b, tb) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.num_questions, 10);
        assert!(generate_synthetic(&SyntheticSpec::new(3, 4, 5, 2, 0)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new(0, 4, 2, 2, 0)).is_err());
    }

    #[test]
    fn synthetic_saturates_with_high_ability() {
        let mut spec = SyntheticSpec::new(5, 4, 2, 40, 11);
        spec.learning_increment = 5.0;
        let (ds, _) = generate_synthetic(&spec).unwrap();
        for seq in &ds.sequences {
            let late_correct = seq.steps[20..].iter().filter(|s| s.correct).count();
            assert!(late_correct >= 19, "late correct {late_correct}");
        }
    }

    #[test]
    fn synthetic_correct_rate_regression() {
        let (ds, _) = generate_synthetic(&SyntheticSpec::new(1000, 50, 5, 50, 2024)).unwrap();
        let correct = ds
            .sequences
            .iter()
            .flat_map(|s| &s.steps)
            .filter(|s| s.correct)
            .count();
        let rate = correct as f64 / ds.num_interactions() as f64;
        assert!((0.3..=0.8).contains(&rate), "rate {rate}");
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        prop::collection::vec(prop::collection::vec((0usize..12, any::<bool>()), 1..30), 1..8).prop_map(|raw| {
            let sequences = raw
                .into_iter()
                .enumerate()
                .map(|(i, steps)| InteractionSequence {
                    student_id: format!("s{i}"),
                    steps: steps.into_iter().map(|(q, y)| Interaction::new(q, y)).collect(),
                })
                .collect();
            Dataset::new("p", 12, sequences).unwrap()
        })
    }

    proptest! {
        #[test]
        fn triple_round_trip(ds in arb_dataset()) {
            let back = parse_triples("p", &to_triples(&ds)).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn windows_concatenate_to_sequence(ds in arb_dataset(), max_len in 1usize..10) {
            for seq in &ds.sequences {
                let joined: Vec<Interaction> = seq.windows(max_len).flatten().copied().collect();
                prop_assert_eq!(&joined, &seq.steps);
                prop_assert!(seq.windows(max_len).all(|w| !w.is_empty() && w.len() <= max_len));
            }
        }

        #[test]
        fn batch_masks_are_prefixes(ds in arb_dataset(), bs in 1usize..5, max_len in 1usize..10, seed in 0u64..100) {
            let batches = batch(&ds, bs, max_len, seed).unwrap();
            prop_assert_eq!(batches.clone(), batch(&ds, bs, max_len, seed).unwrap());
            let total: usize = batches.iter().map(MiniBatch::num_observed).sum();
            prop_assert_eq!(total, ds.num_interactions());
            for b in &batches {
                for lane in 0..b.batch_size {
                    let row = &b.mask[lane * max_len..(lane + 1) * max_len];
                    prop_assert!(row.windows(2).all(|w| w[0] >= w[1]));
                }
            }
        }
    }
}
