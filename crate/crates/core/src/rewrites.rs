//! Rewrite pool and deterministic prompt selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::program::ProgramId;

pub const MAX_REWRITES: usize = 8;

/// Appended to generation prompts that do not ask for a multi-panel layout.
pub const SINGLE_SCENE_CLAUSE: &str = "Render this as a single coherent scene, not a grid or collage.";

pub const MULTI_PANEL_WORDS: [&str; 7] = ["panel", "grid", "collage", "comic", "storyboard", "triptych", "diptych"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewritePool {
    pub source: String,
    pub rewrites: Vec<String>,
    pub used: BTreeSet<usize>,
    pub last: Option<usize>,
    /// True when generation prompts get the single-scene clause.
    pub guard: bool,
}

impl RewritePool {
    /// Filters raw rewrites (empty, duplicate, source-identical) and keeps at most
    /// [`MAX_REWRITES`]. Falls back to the source prompt when nothing survives.
    pub fn build(source: &str, raw: &[String]) -> Self {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        let src = norm(source);
        let mut seen = BTreeSet::new();
        let mut rewrites = Vec::new();
        for r in raw {
            let n = norm(r);
            if n.is_empty() || n == src || !seen.insert(n.clone()) {
                continue;
            }
            rewrites.push(n);
            if rewrites.len() == MAX_REWRITES {
                break;
            }
        }
        if rewrites.is_empty() {
            rewrites.push(source.to_string());
        }
        Self { source: source.to_string(), rewrites, used: BTreeSet::new(), last: None, guard: !is_multi_panel(source) }
    }

    /// Pool holding only the source prompt.
    pub fn source_only(source: &str) -> Self {
        Self::build(source, &[])
    }

    pub fn len(&self) -> usize {
        self.rewrites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewrites.is_empty()
    }

    fn mark(&mut self, i: usize) -> usize {
        self.used.insert(i);
        self.last = Some(i);
        i
    }

    /// `(program_id XOR seed) mod len`.
    pub fn select_initial(&mut self, program_id: ProgramId, seed: u64) -> usize {
        let i = ((program_id.0 ^ seed) % self.len() as u64) as usize;
        self.mark(i)
    }

    /// Lowest unused index; once all are used, steps cyclically from the last pick.
    pub fn next_rewrite(&mut self) -> usize {
        let i = match (0..self.len()).find(|i| !self.used.contains(i)) {
            Some(i) => i,
            None => self.last.map_or(0, |l| (l + 1) % self.len()),
        };
        self.mark(i)
    }

    /// Generation prompt for rewrite `i`, with the single-scene clause when enabled.
    pub fn prompt(&self, i: usize) -> String {
        let text = &self.rewrites[i];
        if self.guard {
            guard_prompt(text, &self.source)
        } else {
            text.clone()
        }
    }
}

/// True when the text asks for a multi-panel or grid layout.
pub fn is_multi_panel(text: &str) -> bool {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .any(|tok| MULTI_PANEL_WORDS.iter().any(|w| tok == *w || tok.strip_suffix('s') == Some(w)))
}

/// Appends the single-scene clause unless `source` requests a multi-panel layout
/// or the clause is already present.
pub fn guard_prompt(text: &str, source: &str) -> String {
    if is_multi_panel(source) || text.trim_end().ends_with(SINGLE_SCENE_CLAUSE) {
        return text.to_string();
    }
    format!("{} {SINGLE_SCENE_CLAUSE}", text.trim_end())
}
