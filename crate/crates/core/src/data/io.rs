//! TSV quadruple parsing, dataset loading, and the binary dataset bundle.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tkg::{with_inverses, DatasetSplit, Quadruple, TemporalKG};
use super::vocab::{Vocab, Vocabs};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 8] = b"STKDATA\0";
pub const BUNDLE_VERSION: u32 = 1;

/// A fact as read from disk: vocabulary ids plus the raw timestamp value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawQuadruple {
    pub subject: u32,
    pub relation: u32,
    pub object: u32,
    pub timestamp: u64,
}

/// Parses one `subject\trelation\tobject\ttimestamp[\t...]` line.
///
/// `line_no` is 1-based and only used for error messages.
pub fn parse_quadruple(line: &str, line_no: usize, origin: &str, vocabs: &mut Vocabs) -> Result<RawQuadruple> {
    let err = |message: String| Error::Parse {
        path: origin.to_string(),
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if fields.len() < 4 {
        return Err(err(format!("expected at least 4 tab-separated fields, found {}", fields.len())));
    }
    if fields[..3].iter().any(|f| f.is_empty()) {
        return Err(err("empty subject, relation, or object".into()));
    }
    let timestamp: u64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| err(format!("non-numeric timestamp {:?}", fields[3])))?;
    Ok(RawQuadruple {
        subject: vocabs.entities.intern(fields[0]),
        relation: vocabs.relations.intern(fields[1]),
        object: vocabs.entities.intern(fields[2]),
        timestamp,
    })
}

fn read_split(path: &Path, vocabs: &mut Vocabs) -> Result<Vec<RawQuadruple>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_quadruple(&line, i + 1, &origin, vocabs)?);
    }
    Ok(out)
}

/// Builds a graph and split from three already-parsed portions.
///
/// Timestamps are replaced by their rank among all distinct raw values.
pub fn assemble(parts: [Vec<RawQuadruple>; 3], vocabs: Vocabs) -> Result<(TemporalKG, DatasetSplit)> {
    let names = ["train", "valid", "test"];
    for i in 0..2 {
        let prev_max = parts[..=i].iter().flatten().map(|q| q.timestamp).max();
        let next_min = parts[i + 1].iter().map(|q| q.timestamp).min();
        if let (Some(a), Some(b)) = (prev_max, next_min) {
            if a > b {
                return Err(Error::Validation(format!(
                    "{} contains timestamp {a} after the earliest {} timestamp {b}",
                    names[i],
                    names[i + 1]
                )));
            }
        }
    }
    let times: Vec<u64> = parts
        .iter()
        .flatten()
        .map(|q| q.timestamp)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let nr = vocabs.relations.len() as u32;
    let mut facts = Vec::new();
    let mut ranges = Vec::with_capacity(3);
    for part in &parts {
        let base: Vec<Quadruple> = part
            .iter()
            .map(|q| {
                let t = times.binary_search(&q.timestamp).expect("collected above") as u32;
                Quadruple::new(q.subject, q.relation, q.object, t)
            })
            .collect();
        let start = facts.len();
        facts.extend(with_inverses(&base, nr));
        ranges.push(start..facts.len());
    }
    let last_time = |r: &std::ops::Range<usize>, fallback: u32| {
        if r.is_empty() {
            fallback
        } else {
            facts[r.end - 1].timestamp
        }
    };
    let t_train = last_time(&ranges[0], 0);
    let t_valid = last_time(&ranges[1], t_train);
    let split = DatasetSplit {
        train: ranges[0].clone(),
        valid: ranges[1].clone(),
        test: ranges[2].clone(),
        boundary_timestamps: (t_train, t_valid),
    };
    let tkg = TemporalKG::from_sorted(facts, vocabs.entities, vocabs.relations, times)?;
    Ok((tkg, split))
}

/// Loads train/valid/test TSV files into one graph.
///
/// Vocabulary ids follow first appearance, reading train, then valid, then test.
pub fn load_dataset(train: &Path, valid: &Path, test: &Path) -> Result<(TemporalKG, DatasetSplit)> {
    let mut vocabs = Vocabs::default();
    let tr = read_split(train, &mut vocabs)?;
    let va = read_split(valid, &mut vocabs)?;
    let te = read_split(test, &mut vocabs)?;
    let (tkg, split) = assemble([tr, va, te], vocabs)?;
    let (a, b, c) = split.base_counts();
    log::info!(
        "loaded {} entities, {} relations, {} timestamps; train/valid/test = {a}/{b}/{c}",
        tkg.num_entities(),
        tkg.num_relations(),
        tkg.num_times()
    );
    Ok((tkg, split))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Validation(format!("bundle string is not UTF-8: {e}")))
}

/// Serializes graph, vocabularies, and split boundaries.
pub fn write_bundle(w: &mut impl Write, tkg: &TemporalKG, split: &DatasetSplit) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_u32::<LittleEndian>(BUNDLE_VERSION)?;
    for vocab in [tkg.entity_vocab(), tkg.relation_vocab()] {
        w.write_u32::<LittleEndian>(vocab.len() as u32)?;
        for name in vocab.names() {
            write_str(w, name)?;
        }
    }
    w.write_u32::<LittleEndian>(tkg.num_times() as u32)?;
    for &t in tkg.raw_times() {
        w.write_u64::<LittleEndian>(t)?;
    }
    w.write_u64::<LittleEndian>(tkg.facts().len() as u64)?;
    for f in tkg.facts() {
        for v in [f.subject, f.relation, f.object, f.timestamp] {
            w.write_u32::<LittleEndian>(v)?;
        }
    }
    for r in [&split.train, &split.valid, &split.test] {
        w.write_u64::<LittleEndian>(r.start as u64)?;
        w.write_u64::<LittleEndian>(r.end as u64)?;
    }
    w.write_u32::<LittleEndian>(split.boundary_timestamps.0)?;
    w.write_u32::<LittleEndian>(split.boundary_timestamps.1)?;
    Ok(())
}

pub fn read_bundle(r: &mut impl Read, origin: &str) -> Result<(TemporalKG, DatasetSplit)> {
    read_bundle_body(r, origin).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
            path: origin.to_string(),
            message: "truncated bundle".into(),
        },
        other => other,
    })
}

fn read_bundle_body(r: &mut impl Read, origin: &str) -> Result<(TemporalKG, DatasetSplit)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format {
            path: origin.to_string(),
            message: "not a dataset bundle".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Format {
            path: origin.to_string(),
            message: format!("bundle version {version}, expected {BUNDLE_VERSION}"),
        });
    }
    let mut vocabs = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.read_u32::<LittleEndian>()?;
        let mut v = Vocab::new();
        for _ in 0..n {
            v.intern(&read_str(r)?);
        }
        if v.len() != n as usize {
            return Err(Error::Validation("duplicate vocabulary entry in bundle".into()));
        }
        vocabs.push(v);
    }
    let nt = r.read_u32::<LittleEndian>()? as usize;
    let times = (0..nt).map(|_| r.read_u64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
    let nf = r.read_u64::<LittleEndian>()? as usize;
    // a corrupt count must not trigger a huge allocation up front
    let mut facts = Vec::with_capacity(nf.min(1 << 20));
    for _ in 0..nf {
        let mut v = [0u32; 4];
        r.read_u32_into::<LittleEndian>(&mut v)?;
        facts.push(Quadruple::new(v[0], v[1], v[2], v[3]));
    }
    let mut ranges = Vec::with_capacity(3);
    for _ in 0..3 {
        let s = r.read_u64::<LittleEndian>()? as usize;
        let e = r.read_u64::<LittleEndian>()? as usize;
        if s > e || e > nf {
            return Err(Error::Validation(format!("bad split range {s}..{e}")));
        }
        ranges.push(s..e);
    }
    let boundary = (r.read_u32::<LittleEndian>()?, r.read_u32::<LittleEndian>()?);
    let relations = vocabs.pop().expect("two vocabularies");
    let entities = vocabs.pop().expect("two vocabularies");
    let tkg = TemporalKG::from_sorted(facts, entities, relations, times)?;
    let split = DatasetSplit {
        train: ranges[0].clone(),
        valid: ranges[1].clone(),
        test: ranges[2].clone(),
        boundary_timestamps: boundary,
    };
    Ok((tkg, split))
}

pub fn save_bundle(path: &Path, tkg: &TemporalKG, split: &DatasetSplit) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(&mut w, tkg, split)?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<(TemporalKG, DatasetSplit)> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_bundle(&mut BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        let mut v = Vocabs::default();
        let q = parse_quadruple("A\tlikes\tB\t0", 1, "x", &mut v).unwrap();
        assert_eq!((q.subject, q.relation, q.object, q.timestamp), (0, 0, 1, 0));
        assert_eq!(parse_quadruple("A\tlikes\tB\t0", 2, "x", &mut v).unwrap(), q);
        let e = parse_quadruple("A\tlikes\t0", 7, "x", &mut v).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 7, .. }), "{e}");
        assert!(parse_quadruple("A\tlikes\tB\tnoon", 3, "x", &mut v).is_err());
        // ICEWS files carry a fifth column
        assert!(parse_quadruple("A\tlikes\tB\t24\t0", 4, "x", &mut v).is_ok());
    }

    #[test]
    fn single_fact_gains_its_inverse() {
        let mut v = Vocabs::default();
        let q = parse_quadruple("A\tr\tB\t5", 1, "x", &mut v).unwrap();
        let (g, split) = assemble([vec![q], vec![], vec![]], v).unwrap();
        assert_eq!(g.facts().len(), 2);
        assert_eq!(split.train, 0..2);
        g.check_inverse_closure().unwrap();
    }

    #[test]
    fn rejects_split_overlap() {
        let mut v = Vocabs::default();
        let a = parse_quadruple("A\tr\tB\t5", 1, "x", &mut v).unwrap();
        let b = parse_quadruple("A\tr\tB\t3", 1, "x", &mut v).unwrap();
        assert!(matches!(assemble([vec![a], vec![b], vec![]], v), Err(Error::Validation(_))));
    }
}
