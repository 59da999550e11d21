use std::collections::HashMap;

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VocabError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("vocabulary is missing the reserved token {0}")]
    MissingReserved(&'static str),
    #[error("duplicate token {0:?} on line {1}")]
    Duplicate(String, usize),
    #[error("max_len {0} cannot hold SOS and EOS")]
    TooShort(usize),
}

/// Dense token ids; `<pad>`, `<sos>` and `<eos>` are reserved.
///
/// On disk a vocabulary is plain text, one token per line, and the
/// zero-based line number is the id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad: usize,
    sos: usize,
    eos: usize,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone(), i));
            }
        }
        let find = |t: &'static str| index.get(t).copied().ok_or(VocabError::MissingReserved(t));
        let (pad, sos, eos) = (find(PAD)?, find(SOS)?, find(EOS)?);
        Ok(Self {
            tokens,
            index,
            pad,
            sos,
            eos,
        })
    }

    /// Reserved tokens followed by every word of the synthetic grammar.
    pub fn synthetic() -> Self {
        let words = [
            PAD, SOS, EOS, "red", "green", "blue", "yellow", "cyan", "magenta", "circle", "square",
            "triangle", "left", "right", "top", "bottom", "on", "the", "of",
        ];
        Self::from_tokens(words).expect("static vocabulary is well formed")
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        Self::from_tokens(text.lines())
    }

    pub fn to_text(&self) -> String {
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }
}

/// Fixed-length token ids: `SOS`, words, `EOS`, then `PAD` up to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of non-pad tokens, SOS and EOS included.
    pub true_length: usize,
    pub eos_position: usize,
}

impl TokenSequence {
    /// True at every non-pad position.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i <= self.eos_position).collect()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Splits on whitespace and maps words to ids. Expressions longer than
/// `max_len - 2` words are cut so that EOS stays the last kept token.
pub fn tokenize(expression: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, VocabError> {
    if max_len < 2 {
        return Err(VocabError::TooShort(max_len));
    }
    let words = expression
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            vocab.id(&w).ok_or(VocabError::UnknownWord(w))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let kept = words.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.sos());
    ids.extend_from_slice(&words[..kept]);
    ids.push(vocab.eos());
    let eos_position = ids.len() - 1;
    ids.resize(max_len, vocab.pad());
    Ok(TokenSequence {
        ids,
        true_length: eos_position + 1,
        eos_position,
    })
}
