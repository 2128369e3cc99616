//! Task corpora as tab-separated text: `id<TAB>question<TAB>a|b|c<TAB>correct_index`
//! per line. Blank lines and lines starting with `#` are skipped.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GuardianError, Result};
use crate::simulator::Task;

pub fn parse_corpus(text: &str, origin: &Path) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let fail = |message: String| GuardianError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let [id, question, answers, correct] = fields[..] else {
            return Err(fail(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let id: usize = id.trim().parse().map_err(|_| fail(format!("bad task id {id:?}")))?;
        if !seen.insert(id) {
            return Err(fail(format!("duplicate task id {id}")));
        }
        let correct: usize = correct
            .trim()
            .parse()
            .map_err(|_| fail(format!("bad correct index {correct:?}")))?;
        let answers: Vec<String> = answers.split('|').map(|a| a.trim().to_string()).collect();
        if answers.iter().any(String::is_empty) {
            return Err(fail("empty answer".into()));
        }
        tasks.push(Task::new(id, question.trim(), answers, correct).map_err(|e| fail(e.to_string()))?);
    }
    if tasks.is_empty() {
        return Err(GuardianError::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: "corpus contains no tasks".into(),
        });
    }
    Ok(tasks)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path).map_err(|e| GuardianError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_corpus(&text, path)
}

/// `count` synthetic tasks with `options` answers each.
pub fn generate_corpus(count: usize, options: usize, seed: u64) -> Result<Vec<Task>> {
    (0..count).map(|id| Task::synthetic(id, options, seed)).collect()
}

pub fn format_corpus(tasks: &[Task]) -> Result<String> {
    let mut out = String::from("# id\tquestion\tanswers\tcorrect_index\n");
    for t in tasks {
        if t.question.contains(['\t', '\n']) || t.answer_space.iter().any(|a| a.contains(['\t', '\n', '|'])) {
            return Err(GuardianError::InvalidArgument(format!("task {} cannot be written as TSV", t.id)));
        }
        let idx = t.answer_space.iter().position(|a| *a == t.correct).unwrap_or(0);
        let _ = writeln!(out, "{}\t{}\t{}\t{idx}", t.id, t.question, t.answer_space.join("|"));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, tasks: &[Task]) -> Result<()> {
    std::fs::write(path, format_corpus(tasks)?)?;
    Ok(())
}
