//! Pair-interaction datasets: a synthetic generator with known ground truth,
//! TSV ingestion, character-level tokenization and seeded splits.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{dot, RandomStream};

pub const MAX_ID_LEN: usize = 20;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Protein identifier: 1–20 characters from `[A-Z0-9_]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProteinId(String);

impl ProteinId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().count() > MAX_ID_LEN {
            return Err(Error::invalid(format!(
                "protein id {id:?} must have 1 to {MAX_ID_LEN} characters"
            )));
        }
        if let Some(c) = id.chars().find(|c| !is_id_char(*c)) {
            return Err(Error::invalid(format!("protein id {id:?} contains {c:?}")));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProteinId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_id_char(c: char) -> bool {
    c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_'
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairExample {
    pub protein_a: ProteinId,
    pub protein_b: ProteinId,
    pub label: u8,
}

impl PairExample {
    pub fn new(protein_a: ProteinId, protein_b: ProteinId, label: u8) -> Result<Self> {
        if protein_a == protein_b {
            return Err(Error::invalid(format!("self-pair {protein_a}")));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label {label} outside {{0, 1}}")));
        }
        Ok(Self {
            protein_a,
            protein_b,
            label,
        })
    }

    /// Order-independent key.
    pub fn unordered_key(&self) -> (ProteinId, ProteinId) {
        if self.protein_a <= self.protein_b {
            (self.protein_a.clone(), self.protein_b.clone())
        } else {
            (self.protein_b.clone(), self.protein_a.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic {
        seed: u64,
    },
    File(PathBuf),
    Split {
        parent: String,
        part: &'static str,
        seed: u64,
    },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Synthetic { seed } => write!(f, "synthetic(seed={seed})"),
            Provenance::File(p) => write!(f, "file({})", p.display()),
            Provenance::Split { parent, part, seed } => write!(f, "{part}-split({parent}, seed={seed})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub provenance: Provenance,
    examples: Vec<PairExample>,
}

impl Dataset {
    /// Rejects duplicate unordered pairs.
    pub fn new(name: impl Into<String>, provenance: Provenance, examples: Vec<PairExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            let key = ex.unordered_key();
            if !seen.insert(key) {
                return Err(Error::invalid(format!(
                    "duplicate pair {} / {}",
                    ex.protein_a, ex.protein_b
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            provenance,
            examples,
        })
    }

    pub fn examples(&self) -> &[PairExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }
}

/// Synthetic dataset together with the ground truth that generated it.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Latent vector of every protein, keyed by identifier.
    pub latents: BTreeMap<ProteinId, Vec<f64>>,
    /// A pair interacts iff its latent dot product exceeds this value.
    pub threshold: f64,
}

impl SyntheticDataset {
    pub fn label_of(&self, a: &ProteinId, b: &ProteinId) -> Option<u8> {
        let za = self.latents.get(a)?;
        let zb = self.latents.get(b)?;
        Some(u8::from(dot(za, zb) > self.threshold))
    }
}

/// Mean of every latent coordinate; shifts part of the interaction signal
/// into per-protein propensity ("hub" proteins interact more often).
const LATENT_OFFSET: f64 = 0.6;
/// Quantile edges of N(0, 1) quartiles.
const QUARTILES: [f64; 3] = [-0.674_489_750_196_081_7, 0.0, 0.674_489_750_196_081_7];
const CODED_DIMS: usize = 6;

/// Draws `n_proteins` latent vectors and `n_pairs` distinct candidate pairs;
/// the upper half by latent dot product is labelled interacting.
///
/// Identifiers are a family code (one letter per latent coordinate, chosen
/// by the quartile of that coordinate) followed by a running number, so the
/// name carries coarse but incomplete information about the latent.
pub fn generate_synthetic(n_proteins: usize, n_pairs: usize, latent_dim: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_pairs == 0 || !n_pairs.is_multiple_of(2) {
        return Err(Error::invalid("n_pairs must be a positive even number"));
    }
    if latent_dim == 0 {
        return Err(Error::invalid("latent_dim must be at least 1"));
    }
    let available = n_proteins.saturating_mul(n_proteins.saturating_sub(1)) / 2;
    if n_pairs > available {
        return Err(Error::invalid(format!(
            "{n_pairs} pairs requested but only {available} distinct pairs exist among {n_proteins} proteins"
        )));
    }
    let root = RandomStream::new(seed);
    let mut latent_rng = root.fork(0);
    let mut pair_rng = root.fork(1);

    let mut ids = Vec::with_capacity(n_proteins);
    let mut latents = BTreeMap::new();
    let width = n_proteins.to_string().len();
    for i in 0..n_proteins {
        let z: Vec<f64> = latent_rng
            .gaussian(latent_dim)
            .into_iter()
            .map(|v| v + LATENT_OFFSET)
            .collect();
        let code: String = z
            .iter()
            .take(CODED_DIMS)
            .enumerate()
            .map(|(dim, &v)| {
                let bucket = QUARTILES.iter().filter(|&&q| v - LATENT_OFFSET >= q).count();
                (b'A' + (4 * dim + bucket) as u8) as char
            })
            .collect();
        let id = ProteinId::new(format!("{code}_{i:0width$}"))?;
        ids.push(id.clone());
        latents.insert(id, z);
    }

    // Candidate pairs: rejection sampling when sparse, full enumeration when dense.
    let mut chosen: Vec<(usize, usize)> = if n_pairs * 2 <= available {
        let mut seen = HashSet::with_capacity(n_pairs);
        let mut out = Vec::with_capacity(n_pairs);
        while out.len() < n_pairs {
            let a = pair_rng.below(n_proteins);
            let b = pair_rng.below(n_proteins);
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                out.push((a, b));
            }
        }
        out
    } else {
        let mut all: Vec<(usize, usize)> = (0..n_proteins)
            .flat_map(|a| ((a + 1)..n_proteins).map(move |b| (a, b)))
            .collect();
        pair_rng.shuffle(&mut all);
        all.truncate(n_pairs);
        all
    };
    chosen.sort_unstable_by_key(|&(a, b)| (a.min(b), a.max(b)));
    pair_rng.shuffle(&mut chosen);

    let scores: Vec<f64> = chosen
        .iter()
        .map(|&(a, b)| dot(&latents[&ids[a]], &latents[&ids[b]]))
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[n_pairs / 2 - 1], sorted[n_pairs / 2]);
    if lo == hi {
        return Err(Error::computation("tied median interaction score; choose another seed"));
    }
    let threshold = 0.5 * (lo + hi);

    let examples = chosen
        .iter()
        .zip(&scores)
        .map(|(&(a, b), &s)| PairExample::new(ids[a].clone(), ids[b].clone(), u8::from(s > threshold)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(
        format!("synthetic-{n_proteins}p-{n_pairs}x{latent_dim}"),
        Provenance::Synthetic { seed },
        examples,
    )?;
    Ok(SyntheticDataset {
        dataset,
        latents,
        threshold,
    })
}

/// Parses `protein_a<TAB>protein_b<TAB>label` lines; a leading header line
/// starting with `protein_a` is skipped.
pub fn load_tsv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, Some(path))
}

pub fn parse_tsv(text: &str, path: Option<&Path>) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.map(Path::to_path_buf),
        line,
        msg,
    };
    let invalid = |line: usize, msg: String| Error::Validation {
        path: path.map(Path::to_path_buf),
        line,
        msg,
    };
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 && line.starts_with("protein_a") {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line_no,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let label: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {:?} is not an integer", fields[2])))?;
        if label > 1 {
            return Err(invalid(line_no, format!("label {label} outside {{0, 1}}")));
        }
        let a = ProteinId::new(fields[0].trim()).map_err(|e| invalid(line_no, e.to_string()))?;
        let b = ProteinId::new(fields[1].trim()).map_err(|e| invalid(line_no, e.to_string()))?;
        let ex = PairExample::new(a, b, label).map_err(|e| invalid(line_no, e.to_string()))?;
        if !seen.insert(ex.unordered_key()) {
            return Err(invalid(
                line_no,
                format!("duplicate pair {} / {}", ex.protein_a, ex.protein_b),
            ));
        }
        examples.push(ex);
    }
    let (name, provenance) = match path {
        Some(p) => (
            p.file_stem()
                .map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
            Provenance::File(p.to_path_buf()),
        ),
        None => ("inline".into(), Provenance::File(PathBuf::new())),
    };
    Dataset::new(name, provenance, examples)
}

pub fn to_tsv(dataset: &Dataset) -> String {
    let mut out = String::from("protein_a\tprotein_b\tlabel\n");
    for ex in dataset.examples() {
        out.push_str(&format!("{}\t{}\t{}\n", ex.protein_a, ex.protein_b, ex.label));
    }
    out
}

pub fn write_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_tsv(dataset)).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle then prefix split; `|train| = round(N·train_fraction)`.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie strictly between 0 and 1"));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split of {n} examples at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RandomStream::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.examples[i].clone()).collect::<Vec<_>>();
    let part = |name: &'static str, idx: &[usize]| {
        Dataset::new(
            format!("{}-{name}", dataset.name),
            Provenance::Split {
                parent: dataset.name.clone(),
                part: name,
                seed,
            },
            pick(idx),
        )
    };
    Ok((part("train", &order[..n_train])?, part("test", &order[n_train..])?))
}

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

/// Character vocabulary; token id = zero-based line index of the vocab file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocab {
    /// `[PAD] [CLS] [SEP] [UNK]`, then `A–Z`, `0–9`, `_`.
    fn default() -> Self {
        let mut tokens: Vec<String> = [PAD, CLS, SEP, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(('A'..='Z').map(String::from));
        tokens.extend(('0'..='9').map(String::from));
        tokens.push("_".into());
        Self::from_tokens(tokens).expect("default vocab is valid")
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("empty vocab entry at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocab entry {t:?}")));
            }
        }
        for special in [PAD, CLS, SEP] {
            if !index.contains_key(special) {
                return Err(Error::invalid(format!("vocab lacks {special}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.index[PAD]
    }

    fn char_id(&self, c: char) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf)).ok_or(Error::Encoding(c))
    }
}

/// `[CLS] a… [SEP] b… [SEP]` padded to `max_len`. When both identifiers do
/// not fit, characters are dropped from the tail of the longer one; the three
/// structural tokens are always kept.
pub fn encode_pair(example: &PairExample, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 5 {
        return Err(Error::invalid("max_len must leave room for both identifiers"));
    }
    let mut a: Vec<char> = example.protein_a.as_str().chars().collect();
    let mut b: Vec<char> = example.protein_b.as_str().chars().collect();
    let budget = max_len - 3;
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let cls = vocab.id(CLS).ok_or_else(|| Error::invalid("vocab lacks [CLS]"))?;
    let sep = vocab.id(SEP).ok_or_else(|| Error::invalid("vocab lacks [SEP]"))?;
    let mut out = Vec::with_capacity(max_len);
    out.push(cls);
    for c in a {
        out.push(vocab.char_id(c)?);
    }
    out.push(sep);
    for c in b {
        out.push(vocab.char_id(c)?);
    }
    out.push(sep);
    out.resize(max_len, vocab.pad_id());
    Ok(out)
}

/// Token sequence plus label, ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    pub label: u8,
}

pub fn encode_dataset(dataset: &Dataset, vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedExample>> {
    dataset
        .examples()
        .iter()
        .map(|ex| {
            Ok(EncodedExample {
                tokens: encode_pair(ex, vocab, max_len)?,
                label: ex.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(s: &str) -> ProteinId {
        ProteinId::new(s).unwrap()
    }

    #[test]
    fn protein_id_charset() {
        assert!(ProteinId::new("P53_A1").is_ok());
        assert!(ProteinId::new("").is_err());
        assert!(ProteinId::new("p53").is_err());
        assert!(ProteinId::new("A".repeat(21)).is_err());
    }

    #[test]
    fn synthetic_is_balanced() {
        let s = generate_synthetic(200, 2000, 8, 1).unwrap();
        assert_eq!(s.dataset.len(), 2000);
        assert_eq!(s.dataset.positives(), 1000);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(50, 200, 4, 9).unwrap();
        let b = generate_synthetic(50, 200, 4, 9).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = generate_synthetic(50, 200, 4, 10).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn synthetic_labels_follow_latents() {
        let s = generate_synthetic(60, 400, 5, 3).unwrap();
        for ex in s.dataset.examples() {
            let za = &s.latents[&ex.protein_a];
            let zb = &s.latents[&ex.protein_b];
            assert_eq!(u8::from(dot(za, zb) > s.threshold), ex.label);
            // Symmetric label function.
            assert_eq!(
                s.label_of(&ex.protein_a, &ex.protein_b),
                s.label_of(&ex.protein_b, &ex.protein_a)
            );
        }
    }

    #[test]
    fn synthetic_dense_regime_and_infeasible_counts() {
        let s = generate_synthetic(10, 44, 3, 0).unwrap();
        assert_eq!(s.dataset.len(), 44);
        assert!(generate_synthetic(10, 46, 3, 0).is_err());
        assert!(generate_synthetic(10, 7, 3, 0).is_err());
    }

    #[test]
    fn tsv_three_lines() {
        let d = parse_tsv("protein_a\tprotein_b\tlabel\nP1\tP2\t1\nP1\tP3\t0\nP2\tP3\t1\n", None).unwrap();
        assert_eq!(d.len(), 3);
        let d = parse_tsv("P1\tP2\t1\nP1\tP3\t0\nP2\tP3\t1", None).unwrap();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        assert!(matches!(
            parse_tsv("P1\tP1\t1\n", None),
            Err(Error::Validation { line: 1, .. })
        ));
        assert!(matches!(
            parse_tsv("P1\tP2\t2\n", None),
            Err(Error::Validation { line: 1, .. })
        ));
        assert!(matches!(
            parse_tsv("P1\tP2\t1\nP2\tP1\t0\n", None),
            Err(Error::Validation { line: 2, .. })
        ));
        assert!(matches!(
            parse_tsv("P1\tP2\t1\nP3 P4 1\n", None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_tsv("P1\tP2\tx\n", None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let s = generate_synthetic(20, 40, 3, 4).unwrap();
        let back = parse_tsv(&to_tsv(&s.dataset), None).unwrap();
        assert_eq!(back.examples(), s.dataset.examples());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = generate_synthetic(10, 10, 2, 0).unwrap();
        let (train, test) = split(&s.dataset, 0.8, 5).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train2, test2) = split(&s.dataset, 0.8, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let train_keys: HashSet<_> = train.examples().iter().map(PairExample::unordered_key).collect();
        assert!(test.examples().iter().all(|e| !train_keys.contains(&e.unordered_key())));
        let mut union: Vec<_> = train
            .examples()
            .iter()
            .chain(test.examples())
            .map(|e| format!("{e:?}"))
            .collect();
        let mut orig: Vec<_> = s.dataset.examples().iter().map(|e| format!("{e:?}")).collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);
        assert!(split(&s.dataset, 1.0, 0).is_err());
        assert!(split(&s.dataset, 0.01, 0).is_err());
    }

    #[test]
    fn encode_known_pair() {
        let vocab = Vocab::default();
        // [PAD]=0 [CLS]=1 [SEP]=2 [UNK]=3 A=4 B=5 C=6 ...
        let ex = PairExample::new(pid("AB"), pid("C"), 1).unwrap();
        let ids = encode_pair(&ex, &vocab, 10).unwrap();
        assert_eq!(ids, vec![1, 4, 5, 2, 6, 2, 0, 0, 0, 0]);
        assert_eq!(encode_pair(&ex, &vocab, 50).unwrap().len(), 50);
        assert_eq!(ids, encode_pair(&ex, &vocab, 10).unwrap());
    }

    #[test]
    fn encode_truncates_identifier_tails() {
        let vocab = Vocab::default();
        let ex = PairExample::new(pid(&"A".repeat(20)), pid(&"B".repeat(20)), 0).unwrap();
        let ids = encode_pair(&ex, &vocab, 30).unwrap();
        assert_eq!(ids.len(), 30);
        assert_eq!(ids[0], 1);
        assert_eq!(ids.iter().filter(|&&t| t == 2).count(), 2);
        assert_eq!(*ids.last().unwrap(), 2);
    }

    #[test]
    fn encode_unknown_character() {
        let vocab = Vocab::from_tokens(vec![PAD.into(), CLS.into(), SEP.into(), "A".into()]).unwrap();
        let ex = PairExample::new(pid("A"), pid("AZ"), 0).unwrap();
        assert!(matches!(encode_pair(&ex, &vocab, 10), Err(Error::Encoding('Z'))));
    }

    #[test]
    fn encode_is_injective_on_short_pairs() {
        let vocab = Vocab::default();
        let names = ["A", "AB", "B", "BA", "A_1", "A1"];
        let mut seen = HashSet::new();
        for a in names {
            for b in names {
                if a == b {
                    continue;
                }
                let ex = PairExample::new(pid(a), pid(b), 0).unwrap();
                assert!(seen.insert(encode_pair(&ex, &vocab, 50).unwrap()));
            }
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::default();
        assert_eq!(v.len(), 41);
        let lines: Vec<String> = v.to_file_contents().lines().map(String::from).collect();
        assert_eq!(Vocab::from_tokens(lines).unwrap(), v);
    }
}
