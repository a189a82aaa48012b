//! Dialogue examples, discrete prompts, the JSONL corpus format and splits.

mod split;
mod synthetic;
mod tokenizer;

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DopError, Result};

pub use split::{build_split, SplitPlan};
pub use synthetic::{
    builtin_domains, distractor_words, generate_synthetic_corpus, DomainTemplate, SlotTemplate,
    SyntheticSpec,
};
pub use tokenizer::{assemble_encoder_input, speaker_tag, EncoderInput, Tokenizer, SPEAKER_TAGS};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueState {
    pub intent: String,
    pub slots: Vec<Slot>,
}

impl DialogueState {
    pub fn new(intent: impl Into<String>, slots: &[(&str, &str)]) -> Self {
        Self {
            intent: intent.into(),
            slots: slots
                .iter()
                .map(|(n, v)| Slot {
                    name: n.to_string(),
                    value: v.to_string(),
                })
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.slots {
            if !seen.insert(s.name.as_str()) {
                return Err(DopError::contract(format!("duplicate slot name {}", s.name)));
            }
        }
        Ok(())
    }
}

/// The discrete prompt attached to a dialogue.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Prompt {
    State(DialogueState),
    /// Passed through verbatim.
    Query(String),
}

impl Prompt {
    pub fn render(&self) -> String {
        match self {
            Prompt::State(s) => serialize_state(s),
            Prompt::Query(q) => q.clone(),
        }
    }
}

/// `<intent>, <name1> is <value1>, <name2> is <value2>, ...`
pub fn serialize_state(state: &DialogueState) -> String {
    let mut out = state.intent.clone();
    for s in &state.slots {
        out.push_str(", ");
        out.push_str(&s.name);
        out.push_str(" is ");
        out.push_str(&s.value);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawExample", into = "RawExample")]
pub struct DialogueExample {
    pub id: String,
    pub domain: String,
    pub turns: Vec<Turn>,
    pub prompt: Prompt,
    pub summary: String,
}

impl DialogueExample {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(DopError::contract(format!("example {} has no turns", self.id)));
        }
        if self.summary.trim().is_empty() {
            return Err(DopError::contract(format!("example {} has an empty summary", self.id)));
        }
        if let Prompt::State(s) = &self.prompt {
            s.check()?;
        }
        Ok(())
    }

    /// Turn texts joined by spaces, without speaker tags.
    pub fn flattened_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Serialize, Deserialize)]
struct RawExample {
    id: String,
    domain: String,
    turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<DialogueState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    summary: String,
}

impl TryFrom<RawExample> for DialogueExample {
    type Error = String;

    fn try_from(r: RawExample) -> std::result::Result<Self, String> {
        let prompt = match (r.state, r.query) {
            (Some(s), None) => Prompt::State(s),
            (None, Some(q)) => Prompt::Query(q),
            (Some(_), Some(_)) => return Err("both \"state\" and \"query\" present".into()),
            (None, None) => return Err("one of \"state\" or \"query\" is required".into()),
        };
        Ok(Self {
            id: r.id,
            domain: r.domain,
            turns: r.turns,
            prompt,
            summary: r.summary,
        })
    }
}

impl From<DialogueExample> for RawExample {
    fn from(e: DialogueExample) -> Self {
        let (state, query) = match e.prompt {
            Prompt::State(s) => (Some(s), None),
            Prompt::Query(q) => (None, Some(q)),
        };
        Self {
            id: e.id,
            domain: e.domain,
            turns: e.turns,
            state,
            query,
            summary: e.summary,
        }
    }
}

/// An immutable collection of examples with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    examples: Vec<DialogueExample>,
}

impl Corpus {
    pub fn new(examples: Vec<DialogueExample>) -> Result<Self> {
        let mut ids = HashSet::new();
        for e in &examples {
            e.validate()?;
            if !ids.insert(e.id.as_str()) {
                return Err(DopError::contract(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[DialogueExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Sorted distinct domain labels.
    pub fn domains(&self) -> Vec<String> {
        self.examples
            .iter()
            .map(|e| e.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn in_domain<'a>(&'a self, domain: &'a str) -> impl Iterator<Item = &'a DialogueExample> + 'a {
        self.examples.iter().filter(move |e| e.domain == domain)
    }

    pub fn get(&self, id: &str) -> Option<&DialogueExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Looks up every id, failing on the first unknown one.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&DialogueExample>> {
        let index: std::collections::HashMap<&str, &DialogueExample> =
            self.examples.iter().map(|e| (e.id.as_str(), e)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DopError::Index(format!("unknown example id {id}")))
            })
            .collect()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DopError::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| DopError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: DialogueExample =
                serde_json::from_str(&line).map_err(|e| DopError::Parse {
                    location: format!("{}:{}", path.display(), i + 1),
                    detail: e.to_string(),
                })?;
            examples.push(ex);
        }
        Self::new(examples)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DopError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.examples {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| DopError::io(path, e))?;
        }
        w.flush().map_err(|e| DopError::io(path, e))
    }
}

/// Per-domain size and mean token lengths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainStats {
    pub domain: String,
    pub size: usize,
    pub dialog_len: f64,
    pub summary_len: f64,
    pub prompt_len: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> Vec<DomainStats> {
    corpus
        .domains()
        .into_iter()
        .map(|d| {
            let ex: Vec<_> = corpus.in_domain(&d).collect();
            let n = ex.len() as f64;
            let mean = |f: &dyn Fn(&DialogueExample) -> usize| {
                ex.iter().map(|e| f(e) as f64).sum::<f64>() / n
            };
            DomainStats {
                size: ex.len(),
                dialog_len: mean(&|e| {
                    e.turns
                        .iter()
                        .map(|t| 1 + Tokenizer::split(&t.text).len())
                        .sum()
                }),
                summary_len: mean(&|e| Tokenizer::split(&e.summary).len()),
                prompt_len: mean(&|e| Tokenizer::split(&e.prompt.render()).len()),
                domain: d,
            }
        })
        .collect()
}

pub fn stats_markdown(stats: &[DomainStats]) -> String {
    let mut s = String::from("| Domain | Size | Dialog.len | Summ.len | DS.len |\n|---|---|---|---|---|\n");
    for d in stats {
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
            d.domain, d.size, d.dialog_len, d.summary_len, d.prompt_len
        ));
    }
    s
}
