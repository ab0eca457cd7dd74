//! Caption corpora with dependency parses, and rule-based object extraction.
//!
//! Parses are consumed as CoNLL-U. Objects are read off the grammatical
//! relations of each caption: nominal subjects (active and passive), direct
//! and indirect objects, adjectival modifiers, and compound chains attached
//! to any selected noun.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    ColumnCount { line: usize, found: usize },
    #[error("line {line}: invalid {field} value {value:?}")]
    Field {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: token index {found} breaks the 1-based contiguous sequence (expected {expected})")]
    NonContiguous {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("sentence ending at line {line}: token {token} has head {head} outside the sentence or pointing at itself")]
    BadHead {
        line: usize,
        token: usize,
        head: usize,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One CoNLL-U token line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedToken {
    /// 1-based position in the sentence.
    pub index: usize,
    pub surface: String,
    pub lemma: String,
    pub upos: String,
    /// Governor index, 0 for the root.
    pub head: usize,
    pub deprel: String,
}

impl ParsedToken {
    /// The relation without its subtype, with the older Stanford labels
    /// mapped to their universal counterparts (`dobj` → `obj`,
    /// `nsubjpass` → `nsubj:pass`).
    fn relation(&self) -> Relation {
        match self.deprel.as_str() {
            "nsubj" => Relation::Subject,
            "nsubjpass" | "nsubj:pass" => Relation::Subject,
            "dobj" | "obj" | "iobj" => Relation::Object,
            "amod" => Relation::AdjModifier,
            "compound" | "compound:nn" => Relation::Compound,
            _ => Relation::Other,
        }
    }

    fn is_verbal(&self) -> bool {
        matches!(self.upos.as_str(), "VERB" | "AUX")
    }

    fn is_pronoun(&self) -> bool {
        self.upos == "PRON"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    Subject,
    Object,
    AdjModifier,
    Compound,
    Other,
}

/// A caption together with its parse and everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub record_id: String,
    pub caption: String,
    pub tokens: Vec<ParsedToken>,
    /// Filled by [`extract_objects`].
    #[serde(default)]
    pub objects: Vec<String>,
    /// Concept id → 0/1 relevance, filled by `concept_pool::caption_relevance`.
    #[serde(default)]
    pub concept_relevance: BTreeMap<usize, u8>,
}

/// Parses CoNLL-U text into one record per sentence.
///
/// `# sent_id = ...` and `# text = ...` comments supply the record id and
/// caption; otherwise the id is `s{n}` (1-based sentence number) and the
/// caption is the space-joined surface forms. Multiword ranges (`3-4`) and
/// empty nodes (`5.1`) are skipped.
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut tokens: Vec<ParsedToken> = Vec::new();
    let mut sent_id: Option<String> = None;
    let mut text: Option<String> = None;
    let mut line_no = 0;

    let mut flush = |tokens: &mut Vec<ParsedToken>,
                     sent_id: &mut Option<String>,
                     text: &mut Option<String>,
                     line: usize,
                     records: &mut Vec<CorpusRecord>|
     -> Result<(), CorpusError> {
        if tokens.is_empty() {
            *sent_id = None;
            *text = None;
            return Ok(());
        }
        let n = tokens.len();
        for t in tokens.iter() {
            if t.head > n || t.head == t.index {
                return Err(CorpusError::BadHead {
                    line,
                    token: t.index,
                    head: t.head,
                });
            }
        }
        let record_id = sent_id
            .take()
            .unwrap_or_else(|| format!("s{}", records.len() + 1));
        if !seen_ids.insert(record_id.clone()) {
            return Err(CorpusError::DuplicateRecord(record_id));
        }
        let caption = text.take().unwrap_or_else(|| {
            tokens
                .iter()
                .map(|t| t.surface.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        });
        records.push(CorpusRecord {
            record_id,
            caption,
            tokens: std::mem::take(tokens),
            objects: Vec::new(),
            concept_relevance: BTreeMap::new(),
        });
        Ok(())
    };

    for line in reader.lines() {
        let line = line?;
        line_no += 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            flush(&mut tokens, &mut sent_id, &mut text, line_no, &mut records)?;
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "sent_id" => sent_id = Some(value.trim().to_string()),
                    "text" => text = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 10 {
            return Err(CorpusError::ColumnCount {
                line: line_no,
                found: cols.len(),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let index: usize = cols[0].parse().map_err(|_| CorpusError::Field {
            line: line_no,
            field: "ID",
            value: cols[0].to_string(),
        })?;
        if index != tokens.len() + 1 {
            return Err(CorpusError::NonContiguous {
                line: line_no,
                expected: tokens.len() + 1,
                found: index,
            });
        }
        let head: usize = cols[6].parse().map_err(|_| CorpusError::Field {
            line: line_no,
            field: "HEAD",
            value: cols[6].to_string(),
        })?;
        let deprel = cols[7].trim();
        if deprel.is_empty() || deprel == "_" {
            return Err(CorpusError::Field {
                line: line_no,
                field: "DEPREL",
                value: cols[7].to_string(),
            });
        }
        tokens.push(ParsedToken {
            index,
            surface: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            head,
            deprel: deprel.to_string(),
        });
    }
    flush(&mut tokens, &mut sent_id, &mut text, line_no, &mut records)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractionOptions {
    /// Emit the bare noun as well as its adjective+noun phrase when the noun
    /// is itself a subject or object.
    pub amod_both: bool,
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_phrase(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Extracts object phrases with default options.
pub fn extract_objects(record: &CorpusRecord) -> Vec<String> {
    extract_objects_with(record, ExtractionOptions::default())
}

pub fn extract_objects_with(record: &CorpusRecord, opts: ExtractionOptions) -> Vec<String> {
    let tokens = &record.tokens;
    if tokens.is_empty() {
        return Vec::new();
    }
    // position (0-based) → dependents, in surface order
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); tokens.len()];
    for (pos, t) in tokens.iter().enumerate() {
        if t.head >= 1 && t.head <= tokens.len() {
            children[t.head - 1].push(pos);
        }
    }

    let mut out: Vec<String> = Vec::new();
    let mut push = |phrase: String| {
        if !phrase.is_empty() && !out.contains(&phrase) {
            out.push(phrase);
        }
    };

    for (pos, tok) in tokens.iter().enumerate() {
        if tok.is_verbal() || tok.is_pronoun() {
            continue;
        }
        let selected = matches!(tok.relation(), Relation::Subject | Relation::Object);
        let adjectives = adjective_run(tokens, &children, pos);
        if !selected && adjectives.is_empty() {
            continue;
        }
        let (start, end) = compound_span(tokens, &children, pos);
        let noun_phrase = span_text(tokens, start, end);
        if adjectives.is_empty() {
            push(noun_phrase);
            continue;
        }
        if selected && opts.amod_both {
            push(noun_phrase.clone());
        }
        // adjective_run only returns a run that ends right before `start`
        let adj_start = adjectives[0];
        push(span_text(tokens, adj_start, end));
    }
    out
}

/// Contiguous span `[start, end]` (0-based, inclusive) around `pos` covering
/// the compound dependents reachable from it.
fn compound_span(tokens: &[ParsedToken], children: &[Vec<usize>], pos: usize) -> (usize, usize) {
    let mut members = HashSet::new();
    members.insert(pos);
    let mut stack = vec![pos];
    while let Some(p) = stack.pop() {
        for &c in &children[p] {
            if tokens[c].relation() == Relation::Compound
                && !tokens[c].is_verbal()
                && members.insert(c)
            {
                stack.push(c);
            }
        }
    }
    let mut start = pos;
    while start > 0 && members.contains(&(start - 1)) {
        start -= 1;
    }
    let mut end = pos;
    while end + 1 < tokens.len() && members.contains(&(end + 1)) {
        end += 1;
    }
    (start, end)
}

/// Adjectival modifiers of `pos` forming an unbroken run immediately to the
/// left of its compound span. Returned in surface order.
fn adjective_run(tokens: &[ParsedToken], children: &[Vec<usize>], pos: usize) -> Vec<usize> {
    let amods: HashSet<usize> = children[pos]
        .iter()
        .copied()
        .filter(|&c| tokens[c].relation() == Relation::AdjModifier && !tokens[c].is_verbal())
        .collect();
    if amods.is_empty() {
        return Vec::new();
    }
    let (start, _) = compound_span(tokens, children, pos);
    let mut run = Vec::new();
    let mut p = start;
    while p > 0 && amods.contains(&(p - 1)) {
        p -= 1;
        run.push(p);
    }
    run.reverse();
    run
}

fn span_text(tokens: &[ParsedToken], start: usize, end: usize) -> String {
    normalize_phrase(
        &tokens[start..=end]
            .iter()
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" "),
    )
}

/// Runs extraction over every record in place.
pub fn extract_all(records: &mut [CorpusRecord], opts: ExtractionOptions) {
    for r in records.iter_mut() {
        r.objects = extract_objects_with(r, opts);
    }
}

/// Object phrases with their record frequencies, most frequent first and
/// ties in lexicographic order.
pub fn corpus_object_vocabulary(records: &[CorpusRecord]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for o in &r.objects {
            *counts.entry(o.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(String, usize)> = counts
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    vocab
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLine {
    pub record_id: String,
    pub caption: String,
    pub objects: Vec<String>,
}

#[derive(Serialize)]
struct ObjectLineRef<'a> {
    record_id: &'a str,
    caption: &'a str,
    objects: &'a [String],
}

/// Writes one `{record_id, caption, objects}` JSON object per line.
pub fn write_objects_jsonl<W: Write>(
    records: &[CorpusRecord],
    mut w: W,
) -> Result<(), CorpusError> {
    for r in records {
        let line = ObjectLineRef {
            record_id: &r.record_id,
            caption: &r.caption,
            objects: &r.objects,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_objects_jsonl<R: BufRead>(r: R) -> Result<Vec<ObjectLine>, CorpusError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Vec<CorpusRecord> {
        parse_conllu(text.as_bytes()).unwrap()
    }

    const HORSE: &str = "# sent_id = horse\n# text = the horse is eating grass\n\
1\tthe\tthe\tDET\tDT\t_\t2\tdet\t_\t_\n\
2\thorse\thorse\tNOUN\tNN\t_\t4\tnsubj\t_\t_\n\
3\tis\tbe\tAUX\tVBZ\t_\t4\taux\t_\t_\n\
4\teating\teat\tVERB\tVBG\t_\t0\troot\t_\t_\n\
5\tgrass\tgrass\tNOUN\tNN\t_\t4\tdobj\t_\t_\n\n";

    #[test]
    fn horse_parse_carries_subject_and_object() {
        let recs = parse(HORSE);
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.record_id, "horse");
        assert_eq!(r.tokens.len(), 5);
        assert_eq!(r.tokens[1].surface, "horse");
        assert_eq!(r.tokens[1].deprel, "nsubj");
        assert_eq!(r.tokens[4].surface, "grass");
        assert_eq!(r.tokens[4].deprel, "dobj");
        assert_eq!(extract_objects(r), vec!["horse", "grass"]);
    }

    #[test]
    fn two_sentences_and_multiword_lines() {
        let text = "1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n\
1\tdo\tdo\tAUX\t_\t_\t3\taux\t_\t_\n\
2\tn't\tnot\tPART\t_\t_\t3\tadvmod\t_\t_\n\
3\trun\trun\tVERB\t_\t_\t0\troot\t_\t_\n\
\n\
1\tdogs\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
2\tbark\tbark\tVERB\t_\t_\t0\troot\t_\t_\n";
        let recs = parse(text);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].tokens.len(), 3);
        assert_eq!(recs[1].tokens.len(), 2);
        assert_eq!(recs[0].record_id, "s1");
        assert_eq!(recs[1].caption, "dogs bark");
    }

    #[test]
    fn nine_columns_is_an_error_at_that_line() {
        let text = "# text = x\n1\tdogs\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n2\tbark\tbark\tVERB\t_\t_\t0\troot\t_\n";
        match parse_conllu(text.as_bytes()) {
            Err(CorpusError::ColumnCount { line, found }) => {
                assert_eq!(line, 3);
                assert_eq!(found, 9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse("").is_empty());
        assert!(parse("\n\n").is_empty());
    }

    #[test]
    fn self_head_rejected() {
        let text = "1\tdogs\tdog\tNOUN\t_\t_\t1\tnsubj\t_\t_\n";
        assert!(matches!(
            parse_conllu(text.as_bytes()),
            Err(CorpusError::BadHead { .. })
        ));
    }

    #[test]
    fn gap_in_indices_rejected() {
        let text =
            "1\tdogs\tdog\tNOUN\t_\t_\t3\tnsubj\t_\t_\n3\tbark\tbark\tVERB\t_\t_\t0\troot\t_\t_\n";
        assert!(matches!(
            parse_conllu(text.as_bytes()),
            Err(CorpusError::NonContiguous { line: 2, .. })
        ));
    }

    #[test]
    fn pronoun_subjects_are_dropped() {
        let text = "1\tit\tit\tPRON\t_\t_\t2\tnsubj\t_\t_\n\
2\teats\teat\tVERB\t_\t_\t0\troot\t_\t_\n\
3\tfish\tfish\tNOUN\t_\t_\t2\tobj\t_\t_\n";
        assert_eq!(extract_objects(&parse(text)[0]), vec!["fish"]);
    }

    #[test]
    fn amod_replaces_bare_noun_unless_both_requested() {
        let text = "1\ta\ta\tDET\t_\t_\t3\tdet\t_\t_\n\
2\tblack\tblack\tADJ\t_\t_\t3\tamod\t_\t_\n\
3\tDog\tdog\tNOUN\t_\t_\t4\tnsubj\t_\t_\n\
4\truns\trun\tVERB\t_\t_\t0\troot\t_\t_\n";
        let r = &parse(text)[0];
        assert_eq!(extract_objects(r), vec!["black dog"]);
        let both = extract_objects_with(r, ExtractionOptions { amod_both: true });
        assert_eq!(both, vec!["dog", "black dog"]);
    }

    #[test]
    fn amod_on_unselected_noun_still_yields_phrase() {
        let text = "1\tbirds\tbird\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
2\tsit\tsit\tVERB\t_\t_\t0\troot\t_\t_\n\
3\ton\ton\tADP\t_\t_\t5\tcase\t_\t_\n\
4\twhite\twhite\tADJ\t_\t_\t5\tamod\t_\t_\n\
5\tsand\tsand\tNOUN\t_\t_\t2\tobl\t_\t_\n";
        assert_eq!(
            extract_objects(&parse(text)[0]),
            vec!["birds", "white sand"]
        );
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_text() {
        let mut a = CorpusRecord {
            record_id: "a".into(),
            caption: String::new(),
            tokens: vec![],
            objects: vec!["horse".into(), "grass".into()],
            concept_relevance: BTreeMap::new(),
        };
        let mut b = a.clone();
        b.record_id = "b".into();
        b.objects = vec!["grass".into()];
        let v = corpus_object_vocabulary(&[a.clone(), b.clone()]);
        assert_eq!(v, vec![("grass".to_string(), 2), ("horse".to_string(), 1)]);
        a.objects = vec!["horse".into()];
        b.objects = vec!["horse".into()];
        assert_eq!(
            corpus_object_vocabulary(&[a, b]),
            vec![("horse".to_string(), 2)]
        );
        assert!(corpus_object_vocabulary(&[]).is_empty());
    }
}
