//! Synthetic recall tasks and a tiny character LM.
//!
//! Every batch is a pure function of `(spec, index)`. `targets[t]` is the
//! token to predict at position `t` and only counts where `mask[t]` is set.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng as _;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

/// Filler token for the recall tasks.
pub const PAD: usize = 0;
/// Start-of-answer token in `selective_copy`.
pub const COPY_MARK: usize = 1;

const SHARD: &str = include_str!("../data/shard.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mqar,
    SelectiveCopy,
    Induction,
    CharLm,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Mqar,
        TaskKind::SelectiveCopy,
        TaskKind::Induction,
        TaskKind::CharLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mqar => "mqar",
            TaskKind::SelectiveCopy => "selective_copy",
            TaskKind::Induction => "induction",
            TaskKind::CharLm => "char_lm",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Key/value pairs (mqar) or payload length (selective_copy).
    pub n_pairs: usize,
    /// Queries per sequence (mqar).
    pub n_queries: usize,
    pub seed: u64,
    pub split: Split,
}

impl TaskSpec {
    /// MQAR with 32 keys, 32 values and a filler token.
    pub fn mqar() -> Self {
        TaskSpec {
            kind: TaskKind::Mqar,
            vocab_size: 65,
            seq_len: 256,
            n_pairs: 8,
            n_queries: 4,
            seed: 0,
            split: Split::Train,
        }
    }

    pub fn new(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Mqar => Self::mqar(),
            TaskKind::SelectiveCopy => TaskSpec {
                kind,
                vocab_size: 16,
                seq_len: 64,
                n_pairs: 8,
                ..Self::mqar()
            },
            TaskKind::Induction => TaskSpec {
                kind,
                vocab_size: 16,
                seq_len: 64,
                ..Self::mqar()
            },
            TaskKind::CharLm => TaskSpec {
                kind,
                vocab_size: char_vocab().len(),
                seq_len: 64,
                ..Self::mqar()
            },
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        TaskSpec {
            split,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.kind.name())));
        match self.kind {
            TaskKind::Mqar => {
                let keys = mqar_keys(self.vocab_size);
                if keys < 1 || self.vocab_size < 3 {
                    return bad(format!("vocab {} leaves no keys", self.vocab_size));
                }
                if self.n_pairs == 0 || self.n_pairs > keys {
                    return bad(format!(
                        "{} pairs need between 1 and {keys} keys",
                        self.n_pairs
                    ));
                }
                if self.n_queries == 0 || self.n_queries > self.n_pairs {
                    return bad(format!(
                        "{} queries for {} pairs",
                        self.n_queries, self.n_pairs
                    ));
                }
                if self.seq_len < 2 * (self.n_pairs + self.n_queries) {
                    return bad(format!(
                        "seq_len {} cannot host {} pairs and {} queries",
                        self.seq_len, self.n_pairs, self.n_queries
                    ));
                }
            }
            TaskKind::SelectiveCopy => {
                if self.vocab_size < 3 || self.n_pairs == 0 {
                    return bad("needs vocab ≥ 3 and a payload".into());
                }
                if self.seq_len < 2 * self.n_pairs {
                    return bad(format!(
                        "seq_len {} below twice the payload {}",
                        self.seq_len, self.n_pairs
                    ));
                }
            }
            TaskKind::Induction => {
                if self.vocab_size < 3 || self.seq_len < 3 {
                    return bad("needs vocab ≥ 3 and seq_len ≥ 3".into());
                }
            }
            TaskKind::CharLm => {
                if self.vocab_size < char_vocab().len() {
                    return bad(format!(
                        "vocab {} below the {}-symbol alphabet",
                        self.vocab_size,
                        char_vocab().len()
                    ));
                }
                let (lo, hi) = char_range(self.split);
                if self.seq_len == 0 || hi - lo <= self.seq_len + 1 {
                    return bad(format!(
                        "seq_len {} does not fit the text shard",
                        self.seq_len
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn row(&self, b: usize) -> (&[usize], &[usize], &[bool]) {
        let r = b * self.len..(b + 1) * self.len;
        (
            &self.tokens[r.clone()],
            &self.targets[r.clone()],
            &self.mask[r],
        )
    }

    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn mqar_keys(vocab: usize) -> usize {
    (vocab - 1) / 2
}

/// Train and eval use complementary halves of the space of key sets: a row
/// whose sorted keys hash to an even value belongs to train.
fn key_set_split(keys: &[usize]) -> Split {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &k in keys {
        h = (h ^ k as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    if h.is_multiple_of(2) {
        Split::Train
    } else {
        Split::Eval
    }
}

fn batch_rng(spec: &TaskSpec, index: u64) -> Rng {
    let mut r = Rng::seed_from_u64(spec.seed);
    let split = matches!(spec.split, Split::Eval) as u64;
    r.set_stream(index.wrapping_mul(2).wrapping_add(split));
    r
}

/// Batch number `index` of `spec`.
pub fn gen_batch(spec: &TaskSpec, batch: usize, index: u64) -> Result<Batch> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::Contract("batch must be at least 1".into()));
    }
    let l = spec.seq_len;
    let mut out = Batch {
        batch,
        len: l,
        tokens: vec![PAD; batch * l],
        targets: vec![PAD; batch * l],
        mask: vec![false; batch * l],
    };
    let mut r = batch_rng(spec, index);
    for b in 0..batch {
        let s = b * l..(b + 1) * l;
        let (t, y, m) = (
            &mut out.tokens[s.clone()],
            &mut out.targets[s.clone()],
            &mut out.mask[s],
        );
        match spec.kind {
            TaskKind::Mqar => mqar_row(spec, &mut r, t, y, m),
            TaskKind::SelectiveCopy => copy_row(spec, &mut r, t, y, m),
            TaskKind::Induction => induction_row(spec, &mut r, t, y, m),
            TaskKind::CharLm => char_row(spec, &mut r, t, y, m),
        }
    }
    Ok(out)
}

/// Pairs `k v` at the start, then `n_queries` two-token spans `k v` at random
/// non-overlapping places in the remainder. The target at a query key is its
/// value. Keys are `1..=K`, values `K+1..`.
fn mqar_row(spec: &TaskSpec, r: &mut Rng, t: &mut [usize], y: &mut [usize], m: &mut [bool]) {
    let nk = mqar_keys(spec.vocab_size);
    let nv = spec.vocab_size - 1 - nk;
    // Rejection-sample key sets from this split; order within the row stays
    // random. With a single possible key set both splits share it.
    let all_keys = spec.n_pairs == nk;
    let keys = loop {
        let keys: Vec<usize> = sample(r, nk, spec.n_pairs)
            .into_iter()
            .map(|k| k + 1)
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        if all_keys || key_set_split(&sorted) == spec.split {
            break keys;
        }
    };
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for (i, &k) in keys.iter().enumerate() {
        let v = nk + 1 + r.random_range(0..nv);
        t[2 * i] = k;
        t[2 * i + 1] = v;
        pairs.push((k, v));
    }
    let start = 2 * spec.n_pairs;
    // Place query spans by choosing offsets among the free slots so spans
    // never overlap: q spans in `free` cells leave `free − 2q` gap cells.
    let free = spec.seq_len - start;
    let gaps = free - 2 * spec.n_queries;
    let mut cuts: Vec<usize> = (0..spec.n_queries)
        .map(|_| r.random_range(0..=gaps))
        .collect();
    cuts.sort_unstable();
    let which = sample(r, spec.n_pairs, spec.n_queries).into_vec();
    for (q, (&cut, &p)) in cuts.iter().zip(&which).enumerate() {
        let pos = start + cut + 2 * q;
        let (k, v) = pairs[p];
        t[pos] = k;
        t[pos + 1] = v;
        y[pos] = v;
        m[pos] = true;
    }
}

/// Payload tokens scattered in a context of `seq_len − n` cells, then a
/// mark and the payload again; targets are the payload in order.
fn copy_row(spec: &TaskSpec, r: &mut Rng, t: &mut [usize], y: &mut [usize], m: &mut [bool]) {
    let n = spec.n_pairs;
    let ctx = spec.seq_len - n;
    let payload: Vec<usize> = (0..n)
        .map(|_| 2 + r.random_range(0..spec.vocab_size - 2))
        .collect();
    let mut slots = sample(r, ctx, n).into_vec();
    slots.sort_unstable();
    for (&s, &p) in slots.iter().zip(&payload) {
        t[s] = p;
    }
    t[ctx] = COPY_MARK;
    for i in 0..n {
        if i + 1 < n {
            t[ctx + 1 + i] = payload[i];
        }
        y[ctx + i] = payload[i];
        m[ctx + i] = true;
    }
}

/// Random tokens with a single `a b` bigram planted early and `a` again at
/// the last position; the target there is `b`. `a` occurs nowhere else.
fn induction_row(spec: &TaskSpec, r: &mut Rng, t: &mut [usize], y: &mut [usize], m: &mut [bool]) {
    let v = spec.vocab_size;
    let l = spec.seq_len;
    let a = r.random_range(1..v);
    let other = |r: &mut Rng| loop {
        let x = r.random_range(1..v);
        if x != a {
            break x;
        }
    };
    for x in t.iter_mut() {
        *x = other(r);
    }
    let p = r.random_range(0..(l - 2).div_ceil(2).max(1));
    t[p] = a;
    t[l - 1] = a;
    y[l - 1] = t[p + 1];
    m[l - 1] = true;
}

fn char_vocab() -> Vec<char> {
    let mut cs: Vec<char> = SHARD.chars().collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Character offsets of each split within the shard (last tenth is eval).
fn char_range(split: Split) -> (usize, usize) {
    let n = SHARD.chars().count();
    let cut = n - n / 10;
    match split {
        Split::Train => (0, cut),
        Split::Eval => (cut, n),
    }
}

pub fn encode_chars(s: &str) -> Result<Vec<usize>> {
    let v = char_vocab();
    s.chars()
        .map(|c| {
            v.binary_search(&c)
                .map_err(|_| Error::Index(format!("character {c:?} not in alphabet")))
        })
        .collect()
}

pub fn decode_chars(ids: &[usize]) -> String {
    let v = char_vocab();
    ids.iter()
        .map(|&i| v.get(i).copied().unwrap_or('?'))
        .collect()
}

fn char_row(spec: &TaskSpec, r: &mut Rng, t: &mut [usize], y: &mut [usize], m: &mut [bool]) {
    let text = encode_chars(SHARD).expect("shard alphabet");
    let (lo, hi) = char_range(spec.split);
    let start = lo + r.random_range(0..hi - lo - spec.seq_len);
    t.copy_from_slice(&text[start..start + spec.seq_len]);
    y.copy_from_slice(&text[start + 1..start + 1 + spec.seq_len]);
    m.fill(true);
}

/// Fraction of masked positions whose argmax (ties to the lower id) equals
/// the target. `logits: [B, L, V]`.
pub fn exact_match_accuracy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.numel() / v.max(1);
    if rows != targets.len() || rows != mask.len() {
        return Err(crate::error::shape_err(
            "exact_match_accuracy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for ((row, &y), &m) in logits.data().chunks(v).zip(targets).zip(mask) {
        if !m {
            continue;
        }
        n += 1;
        hit += (argmax(row) == y) as usize;
    }
    if n == 0 {
        return Err(Error::Contract("accuracy over an empty mask".into()));
    }
    Ok(hit as f64 / n as f64)
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions of a solver that reads only `tokens[..=t]` at each masked
/// position `t`, one per masked position in row-major order. The char LM
/// oracle looks the row up in the text instead.
pub fn oracle_predictions(spec: &TaskSpec, batch: &Batch) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch.masked());
    let text = if spec.kind == TaskKind::CharLm {
        encode_chars(SHARD).expect("shard alphabet")
    } else {
        Vec::new()
    };
    for b in 0..batch.batch {
        let (t, _, m) = batch.row(b);
        let window = (spec.kind == TaskKind::CharLm)
            .then(|| text.windows(t.len() + 1).find(|w| w[..t.len()] == *t))
            .flatten();
        for pos in (0..t.len()).filter(|&p| m[p]) {
            let seen = &t[..=pos];
            out.push(match spec.kind {
                TaskKind::Mqar => {
                    let mut map = HashMap::new();
                    for w in seen.windows(2) {
                        if w[0] != PAD {
                            map.entry(w[0]).or_insert(w[1]);
                        }
                    }
                    map.get(&seen[pos]).copied().unwrap_or(PAD)
                }
                TaskKind::SelectiveCopy => {
                    let ctx = spec.seq_len - spec.n_pairs;
                    let payload: Vec<usize> =
                        seen[..ctx].iter().copied().filter(|&x| x != PAD).collect();
                    payload.get(pos - ctx).copied().unwrap_or(PAD)
                }
                TaskKind::Induction => {
                    let a = seen[pos];
                    seen[..pos]
                        .iter()
                        .position(|&x| x == a)
                        .map_or(PAD, |i| seen[i + 1])
                }
                // A continuation can't be read off a prefix.
                TaskKind::CharLm => window.map_or(PAD, |w| w[pos + 1]),
            });
        }
    }
    out
}

/// Fraction of masked targets the oracle gets right.
pub fn oracle_accuracy(spec: &TaskSpec, batch: &Batch) -> f64 {
    let want: Vec<usize> = batch
        .targets
        .iter()
        .zip(&batch.mask)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .collect();
    let got = oracle_predictions(spec, batch);
    let hits = got.iter().zip(&want).filter(|(a, b)| a == b).count();
    hits as f64 / want.len().max(1) as f64
}

/// Sorted key set of each MQAR row.
pub fn mqar_key_sets(spec: &TaskSpec, batch: &Batch) -> Vec<Vec<usize>> {
    (0..batch.batch)
        .map(|b| {
            let t = batch.row(b).0;
            let mut keys: Vec<usize> = (0..spec.n_pairs).map(|i| t[2 * i]).collect();
            keys.sort_unstable();
            keys
        })
        .collect()
}

const MAGIC: &[u8; 8] = b"OTCEBTCH";

/// Flat little-endian export: magic, format version, kind name, batch,
/// length, then tokens and targets as u32 and the mask as bytes.
pub fn write_batch<W: Write>(w: &mut W, kind: TaskKind, b: &Batch) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    let name = kind.name().as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(b.batch as u32).to_le_bytes())?;
    w.write_all(&(b.len as u32).to_le_bytes())?;
    for &x in b.tokens.iter().chain(&b.targets) {
        w.write_all(&(x as u32).to_le_bytes())?;
    }
    let mask: Vec<u8> = b.mask.iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    Ok(())
}

pub fn read_batch<R: Read>(r: &mut R) -> Result<(TaskKind, Batch)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a batch file".into()));
    }
    let mut u32_at = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_at()?;
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported batch version {version}"
        )));
    }
    let n = u32_at()? as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let kind: TaskKind = String::from_utf8(name)
        .map_err(|_| Error::Format("task name is not UTF-8".into()))?
        .parse()?;
    let mut u32_at = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let batch = u32_at()? as usize;
    let len = u32_at()? as usize;
    let cells = batch * len;
    let mut read_ids =
        || -> Result<Vec<usize>> { (0..cells).map(|_| u32_at().map(|x| x as usize)).collect() };
    let tokens = read_ids()?;
    let targets = read_ids()?;
    let mut mask = vec![0u8; cells];
    r.read_exact(&mut mask)?;
    Ok((
        kind,
        Batch {
            batch,
            len,
            tokens,
            targets,
            mask: mask.into_iter().map(|m| m != 0).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    #[test]
    fn mqar_single_pair_single_query() {
        let spec = TaskSpec {
            n_pairs: 1,
            n_queries: 1,
            seq_len: 8,
            ..TaskSpec::mqar()
        };
        let b = gen_batch(&spec, 1, 0).unwrap();
        assert_eq!(b.masked(), 1);
        let pos = b.mask.iter().position(|&m| m).unwrap();
        assert_eq!(b.tokens[pos], b.tokens[0]);
        assert_eq!(b.targets[pos], b.tokens[1]);
    }

    #[test]
    fn mqar_splits_share_no_key_set() {
        use std::collections::HashSet;
        let spec = TaskSpec {
            n_pairs: 3,
            n_queries: 1,
            seq_len: 16,
            ..TaskSpec::mqar()
        };
        let sets = |split| -> HashSet<Vec<usize>> {
            (0..200)
                .flat_map(|i| {
                    mqar_key_sets(&spec, &gen_batch(&spec.with_split(split), 4, i).unwrap())
                })
                .collect()
        };
        let (train, eval) = (sets(Split::Train), sets(Split::Eval));
        assert!(train.len() > 100 && eval.len() > 100);
        assert!(train.is_disjoint(&eval));
    }

    #[test]
    fn mqar_rejects_short_sequences() {
        let spec = TaskSpec {
            seq_len: 20,
            ..TaskSpec::mqar()
        };
        assert!(matches!(gen_batch(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn selective_copy_without_noise_is_identity_copy() {
        let spec = TaskSpec {
            seq_len: 16,
            n_pairs: 8,
            ..TaskSpec::new(TaskKind::SelectiveCopy)
        };
        let b = gen_batch(&spec, 3, 0).unwrap();
        for r in 0..3 {
            let (t, y, m) = b.row(r);
            assert_eq!(&y[8..], &t[..8]);
            assert!(m[8..].iter().all(|&x| x) && !m[..8].iter().any(|&x| x));
        }
    }

    #[test]
    fn same_index_same_batch() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            assert_eq!(
                gen_batch(&spec, 4, 9).unwrap(),
                gen_batch(&spec, 4, 9).unwrap()
            );
            assert_ne!(
                gen_batch(&spec, 4, 9).unwrap(),
                gen_batch(&spec, 4, 10).unwrap()
            );
        }
    }

    #[test]
    fn oracles_solve_every_kind() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            for i in 0..20 {
                let b = gen_batch(&spec.with_split(Split::Eval), 4, i).unwrap();
                assert_eq!(oracle_accuracy(&spec, &b), 1.0, "{kind:?}");
            }
        }
    }

    #[test]
    fn accuracy_one_hot_and_chance() {
        let targets = [2usize, 0, 1];
        let mut logits = Tensor::<f64>::zeros([1, 3, 4]);
        for (i, &y) in targets.iter().enumerate() {
            logits.data_mut()[i * 4 + y] = 1.0;
        }
        assert_eq!(
            exact_match_accuracy(&logits, &targets, &[true; 3]).unwrap(),
            1.0
        );
        assert!(exact_match_accuracy(&logits, &targets, &[false; 3]).is_err());

        let mut r = rng(3);
        let n = 10_000;
        let logits = Tensor::<f64>::randn([n, 8], 1.0, &mut r);
        let ys: Vec<usize> = (0..n).map(|_| r.random_range(0..8)).collect();
        let acc = exact_match_accuracy(&logits, &ys, &vec![true; n]).unwrap();
        assert!((acc - 0.125).abs() < 0.015, "{acc}");
    }

    #[test]
    fn batch_export_round_trips() {
        let spec = TaskSpec::new(TaskKind::Induction);
        let b = gen_batch(&spec, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_batch(&mut buf, spec.kind, &b).unwrap();
        let (kind, back) = read_batch(&mut buf.as_slice()).unwrap();
        assert_eq!((kind, back), (spec.kind, b));
        assert!(read_batch(&mut &buf[..10]).is_err());
    }

    #[test]
    fn char_codec_round_trips() {
        let ids = encode_chars("Four score").unwrap();
        assert_eq!(decode_chars(&ids), "Four score");
        assert!(encode_chars("\u{263a}").is_err());
    }
}
