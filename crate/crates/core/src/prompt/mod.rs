//! Stage prompt templates and the parsers for their responses.

mod parse;
mod template;

pub use parse::*;
pub use template::{sha256_hex, PromptTemplate, Stage, TemplateSet};
