//! Small stand-ins for the text and image towers, producing the feature
//! interfaces the fusion neck and query generator consume.

mod image;
mod text;
pub mod vocab;

pub use image::{ImageEncoder, ImageFeatures};
pub use text::{TextEncoder, TextFeatures};
pub use vocab::{tokenize, TokenSequence, VocabError, Vocabulary};
