use crate::error::{AsrError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub type TokenId = usize;

/// Token inventory with the layout `blank = 0`, content tokens `1..=K`,
/// `eos = K + 1`, `sos = K + 2`.
///
/// CTC classes are ids `0..=K`; decoder output classes are ids `1..=K+1`
/// shifted down by one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank: TokenId,
    eos: TokenId,
    sos: TokenId,
}

impl Vocabulary {
    pub fn synthetic(content_tokens: usize) -> Self {
        let mut tokens = vec!["<blank>".to_string()];
        tokens.extend((0..content_tokens).map(|i| format!("w{i:02}")));
        tokens.push("<eos>".into());
        tokens.push("<sos>".into());
        Vocabulary {
            tokens,
            blank: 0,
            eos: content_tokens + 1,
            sos: content_tokens + 2,
        }
    }

    /// Validates the reserved-index layout and uniqueness of strings.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(AsrError::config("vocabulary needs at least one content token"));
        }
        let k = tokens.len() - 3;
        let v = Vocabulary {
            tokens,
            blank: 0,
            eos: k + 1,
            sos: k + 2,
        };
        let mut seen = HashMap::new();
        for (i, t) in v.tokens.iter().enumerate() {
            if seen.insert(t.clone(), i).is_some() {
                return Err(AsrError::config(format!("duplicate token string {t:?}")));
            }
        }
        Ok(v)
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn sos(&self) -> TokenId {
        self.sos
    }

    /// Number of content tokens K.
    pub fn content_size(&self) -> usize {
        self.tokens.len() - 3
    }

    /// Total number of ids including reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// CTC output classes: blank plus content tokens.
    pub fn ctc_classes(&self) -> usize {
        self.content_size() + 1
    }

    /// Decoder output classes: content tokens plus eos.
    pub fn decoder_classes(&self) -> usize {
        self.content_size() + 1
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        id >= 1 && id <= self.content_size()
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> {
        1..=self.content_size()
    }

    pub fn decoder_class(&self, id: TokenId) -> Option<usize> {
        (id >= 1 && id <= self.eos).then(|| id - 1)
    }

    pub fn token_of_decoder_class(&self, class: usize) -> TokenId {
        class + 1
    }

    pub fn string(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, s: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == s)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.string(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_not_content() {
        let v = Vocabulary::synthetic(16);
        let reserved = [v.blank(), v.eos(), v.sos()];
        assert_eq!(reserved, [0, 17, 18]);
        for r in reserved {
            assert!(!v.is_content(r));
        }
        assert_eq!(v.content_ids().count(), 16);
    }

    #[test]
    fn string_mapping_is_bijective() {
        let v = Vocabulary::synthetic(5);
        for i in 0..v.len() {
            assert_eq!(v.id(v.string(i).unwrap()), Some(i));
        }
        assert!(Vocabulary::from_tokens(vec!["a".into(), "b".into(), "b".into(), "c".into()]).is_err());
    }

    #[test]
    fn decoder_classes_cover_content_and_eos() {
        let v = Vocabulary::synthetic(4);
        assert_eq!(v.decoder_class(1), Some(0));
        assert_eq!(v.decoder_class(v.eos()), Some(4));
        assert_eq!(v.decoder_class(v.sos()), None);
        assert_eq!(v.decoder_class(v.blank()), None);
        assert_eq!(v.token_of_decoder_class(4), v.eos());
    }
}
