use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frequency {
    Hourly,
    Daily,
    Weekly,
    Monthly,
}

impl Frequency {
    pub const ALL: [Frequency; 4] = [Self::Hourly, Self::Daily, Self::Weekly, Self::Monthly];

    fn code(self) -> &'static str {
        match self {
            Self::Hourly => "H",
            Self::Daily => "D",
            Self::Weekly => "W",
            Self::Monthly => "M",
        }
    }
}

impl FromStr for Frequency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown frequency {s:?}")))
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LenBucket {
    Short,
    Medium,
    Long,
}

impl LenBucket {
    pub fn for_context(t: usize) -> Self {
        match t {
            0..=31 => Self::Short,
            32..=127 => Self::Medium,
            _ => Self::Long,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trend {
    Up,
    Down,
    Flat,
}

/// One symbol of the reasoning alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Sep,
    Freq(Frequency),
    Len(LenBucket),
    Trend(Trend),
    Seasonal(bool),
    Bin(usize),
    /// `None` is `EVENT_NONE`.
    Event(Option<usize>),
    Mode(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Bos => f.write_str("BOS"),
            Token::Eos => f.write_str("EOS"),
            Token::Sep => f.write_str("SEP"),
            Token::Freq(q) => write!(f, "FREQ_{q}"),
            Token::Len(LenBucket::Short) => f.write_str("LEN_S"),
            Token::Len(LenBucket::Medium) => f.write_str("LEN_M"),
            Token::Len(LenBucket::Long) => f.write_str("LEN_L"),
            Token::Trend(Trend::Up) => f.write_str("TREND_UP"),
            Token::Trend(Trend::Down) => f.write_str("TREND_DOWN"),
            Token::Trend(Trend::Flat) => f.write_str("TREND_FLAT"),
            Token::Seasonal(true) => f.write_str("SEAS_YES"),
            Token::Seasonal(false) => f.write_str("SEAS_NO"),
            Token::Bin(i) => write!(f, "BIN_{i}"),
            Token::Event(Some(k)) => write!(f, "EVENT_{k}"),
            Token::Event(None) => f.write_str("EVENT_NONE"),
            Token::Mode(k) => write!(f, "MODE_{k}"),
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown token {s:?}"));
        let index = |rest: &str| rest.parse::<usize>().map_err(|_| bad());
        Ok(match s {
            "PAD" => Token::Pad,
            "BOS" => Token::Bos,
            "EOS" => Token::Eos,
            "SEP" => Token::Sep,
            "LEN_S" => Token::Len(LenBucket::Short),
            "LEN_M" => Token::Len(LenBucket::Medium),
            "LEN_L" => Token::Len(LenBucket::Long),
            "TREND_UP" => Token::Trend(Trend::Up),
            "TREND_DOWN" => Token::Trend(Trend::Down),
            "TREND_FLAT" => Token::Trend(Trend::Flat),
            "SEAS_YES" => Token::Seasonal(true),
            "SEAS_NO" => Token::Seasonal(false),
            "EVENT_NONE" => Token::Event(None),
            _ => {
                if let Some(rest) = s.strip_prefix("FREQ_") {
                    Token::Freq(rest.parse()?)
                } else if let Some(rest) = s.strip_prefix("BIN_") {
                    Token::Bin(index(rest)?)
                } else if let Some(rest) = s.strip_prefix("EVENT_") {
                    Token::Event(Some(index(rest)?))
                } else if let Some(rest) = s.strip_prefix("MODE_") {
                    Token::Mode(index(rest)?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

/// Dense, stable token ↔ id mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<Token, usize>,
    n_bins: usize,
}

impl Vocabulary {
    pub fn new(n_bins: usize, n_events: usize, n_modes: usize) -> Self {
        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Sep];
        tokens.extend(Frequency::ALL.map(Token::Freq));
        tokens.extend([LenBucket::Short, LenBucket::Medium, LenBucket::Long].map(Token::Len));
        tokens.extend([Trend::Up, Trend::Down, Trend::Flat].map(Token::Trend));
        tokens.extend([Token::Seasonal(true), Token::Seasonal(false)]);
        tokens.extend((0..n_bins).map(Token::Bin));
        tokens.extend((0..n_events).map(|k| Token::Event(Some(k))));
        tokens.push(Token::Event(None));
        tokens.extend((0..n_modes).map(Token::Mode));
        Self::from_tokens(tokens).expect("builtin vocabulary is unique")
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(*t, i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t}")));
            }
        }
        for required in [Token::Pad, Token::Bos, Token::Eos, Token::Sep] {
            if !ids.contains_key(&required) {
                return Err(Error::Vocabulary(format!("missing structural token {required}")));
            }
        }
        let n_bins = tokens.iter().filter(|t| matches!(t, Token::Bin(_))).count();
        Ok(Self { tokens, ids, n_bins })
    }

    /// Parses the ordered token-string list stored in checkpoints.
    pub fn from_strings<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let tokens = items
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<Token>>>()?;
        Self::from_tokens(tokens)
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.tokens.iter().map(Token::to_string).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn id(&self, t: Token) -> Result<usize> {
        self.ids
            .get(&t)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("token {t} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<Token> {
        self.tokens
            .get(id)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("id {id} outside vocabulary of {}", self.len())))
    }

    pub fn contains_id(&self, id: usize) -> bool {
        id < self.tokens.len()
    }

    pub fn pad(&self) -> usize {
        self.ids[&Token::Pad]
    }

    pub fn bos(&self) -> usize {
        self.ids[&Token::Bos]
    }

    pub fn eos(&self) -> usize {
        self.ids[&Token::Eos]
    }

    pub fn sep(&self) -> usize {
        self.ids[&Token::Sep]
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<usize>> {
        tokens.iter().map(|&t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Token>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_roundtrip_through_strings() {
        let v = Vocabulary::new(16, 2, 2);
        assert_eq!(v.len(), 4 + 4 + 3 + 3 + 2 + 16 + 3 + 2);
        for (i, t) in v.tokens.iter().enumerate() {
            assert_eq!(v.id(*t).unwrap(), i);
        }
        let back = Vocabulary::from_strings(&v.to_strings()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.n_bins(), 16);
    }

    #[test]
    fn token_strings_parse() {
        for s in [
            "BIN_15",
            "EVENT_NONE",
            "EVENT_3",
            "MODE_1",
            "FREQ_H",
            "TREND_FLAT",
            "SEAS_NO",
        ] {
            assert_eq!(s.parse::<Token>().unwrap().to_string(), s);
        }
        assert!("BIN_x".parse::<Token>().is_err());
        assert!("WHAT".parse::<Token>().is_err());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocabulary::from_tokens(vec![Token::Pad, Token::Bos, Token::Eos, Token::Sep, Token::Sep]).is_err());
    }
}
