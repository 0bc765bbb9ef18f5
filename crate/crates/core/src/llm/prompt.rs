use std::fmt::Write as _;

use once_cell::sync::Lazy;
use serde::Deserialize;

use crate::error::{Error, Result};

const DEFAULT_PROMPT: &str = include_str!("../../fixtures/prompt.toml");

static DEFAULT_TEMPLATE: Lazy<PromptTemplate> =
    Lazy::new(|| PromptTemplate::from_toml(DEFAULT_PROMPT).expect("bundled prompt is valid"));

#[derive(Debug, Clone, Deserialize)]
struct PromptFile {
    version: u32,
    task: String,
    constraints: String,
    #[serde(default)]
    examples: Vec<FewShot>,
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
pub struct FewShot {
    pub log: String,
    pub variables: Vec<String>,
}

/// The fixed parts of every prompt.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub version: u32,
    pub task_description: String,
    pub constraints: String,
    pub examples: Vec<FewShot>,
    rendered_examples: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        DEFAULT_TEMPLATE.clone()
    }
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PromptFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("prompt file: {e}")))?;
        let mut rendered = String::from("Examples:\n");
        for ex in &file.examples {
            let answer = serde_json::to_string(&ex.variables).expect("strings serialize");
            let _ = write!(
                rendered,
                "\nMessages:\n1: {}\nAnswer:\n1: {answer}\n",
                ex.log
            );
        }
        Ok(PromptTemplate {
            version: file.version,
            task_description: file.task.trim().to_owned(),
            constraints: file.constraints.trim().to_owned(),
            examples: file.examples,
            rendered_examples: rendered,
        })
    }

    /// Builds the prompt for 1..=`max_batch` messages.
    pub fn build(&self, messages: &[&str], max_batch: usize) -> Result<PromptEnvelope> {
        if messages.is_empty() || messages.len() > max_batch {
            return Err(Error::InternalInvariant(format!(
                "prompt needs between 1 and {max_batch} messages, got {}",
                messages.len()
            )));
        }
        let mut payload = String::from("Messages:\n");
        for (i, m) in messages.iter().enumerate() {
            let one_line: String = m
                .chars()
                .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
                .collect();
            let _ = writeln!(payload, "{}: {one_line}", i + 1);
        }
        payload.push_str("Answer:\n");
        Ok(PromptEnvelope {
            task_description: self.task_description.clone(),
            constraints: self.constraints.clone(),
            examples: self.rendered_examples.clone(),
            payload,
            messages: messages.iter().map(|m| m.to_string()).collect(),
        })
    }
}

/// Builds a prompt from the bundled template.
pub fn build_prompt(messages: &[&str], max_batch: usize) -> Result<PromptEnvelope> {
    DEFAULT_TEMPLATE.build(messages, max_batch)
}

/// One request's prompt. Only `payload` and `messages` vary between requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptEnvelope {
    pub task_description: String,
    pub constraints: String,
    pub examples: String,
    pub payload: String,
    pub messages: Vec<String>,
}

impl PromptEnvelope {
    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\n\n{}\n{}",
            self.task_description, self.constraints, self.examples, self.payload
        )
    }
}
