//! Byte-level tokenizer with reserved special ids.
//!
//! The vocabulary is fixed at build time:
//!
//! * ids `0..=255` — raw bytes;
//! * `256` — `<pad>`, `257` — `<eos>`;
//! * `258`/`259`/`260` — the mode tokens `[S2S]`, `[NLU]`, `[NLG]` that tag
//!   which training objective produced an example;
//! * the last 100 ids — sentinels `<extra_id_0>`..`<extra_id_99>`, allocated
//!   from the top of the vocabulary downward, so `<extra_id_0>` is the
//!   highest id.
//!
//! Encoding maps bytes to their own ids and never emits special tokens;
//! special ids are inserted by the denoisers and prompt builders.

use thiserror::Error;

/// Token ids are plain integers below [`Vocab::SIZE`].
pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {0} is outside the vocabulary (size {size})", size = Vocab::SIZE)]
    OutOfVocab(TokenId),
    #[error("sentinel index {0} exceeds the sentinel budget of {budget}", budget = Vocab::SENTINEL_COUNT)]
    SentinelIndex(usize),
    #[error("unknown special token name {0:?}")]
    UnknownSpecial(String),
}

/// The fixed byte-level vocabulary layout. All state is compile-time
/// constant; the struct exists to namespace the layout and its operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    /// Number of raw byte ids.
    pub const BASE_SIZE: usize = 256;
    /// Number of sentinel ids reserved at the top of the vocabulary.
    pub const SENTINEL_COUNT: usize = 100;
    /// Total vocabulary size: bytes + pad + eos + 3 mode tokens + sentinels.
    pub const SIZE: usize = Self::BASE_SIZE + 2 + 3 + Self::SENTINEL_COUNT;

    pub const PAD: TokenId = 256;
    pub const EOS: TokenId = 257;
    /// Mode token prepended by the sequential (prefix/continuation) denoiser.
    pub const MODE_S2S: TokenId = 258;
    /// Mode token prepended by the regular span-corruption denoiser.
    pub const MODE_NLU: TokenId = 259;
    /// Mode token prepended by the extreme span-corruption denoisers.
    pub const MODE_NLG: TokenId = 260;

    /// Sentinel id for span `k`. Sentinels grow downward from the top of the
    /// vocabulary: `sentinel(0)` is the highest id.
    pub fn sentinel(k: usize) -> Result<TokenId, TokenizerError> {
        if k >= Self::SENTINEL_COUNT {
            return Err(TokenizerError::SentinelIndex(k));
        }
        Ok((Self::SIZE - 1 - k) as TokenId)
    }

    /// Inverse of [`Vocab::sentinel`]: the span index of a sentinel id.
    pub fn sentinel_index(id: TokenId) -> Option<usize> {
        if Self::is_sentinel(id) {
            Some(Self::SIZE - 1 - id as usize)
        } else {
            None
        }
    }

    pub fn is_byte(id: TokenId) -> bool {
        (id as usize) < Self::BASE_SIZE
    }

    pub fn is_sentinel(id: TokenId) -> bool {
        let id = id as usize;
        id >= Self::SIZE - Self::SENTINEL_COUNT && id < Self::SIZE
    }

    pub fn is_mode(id: TokenId) -> bool {
        matches!(id, Self::MODE_S2S | Self::MODE_NLU | Self::MODE_NLG)
    }

    /// Any non-byte id: pad, eos, mode tokens, sentinels.
    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::SIZE && !Self::is_byte(id)
    }

    /// Encode raw bytes. Infallible and injective: every byte maps to its own
    /// id and no special token is ever produced.
    pub fn encode(bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| b as TokenId).collect()
    }

    /// Decode a token sequence back to bytes. Byte ids decode to their
    /// bytes; special ids render as bracketed names (`<pad>`, `<eos>`,
    /// `[S2S]`, `[NLU]`, `[NLG]`, `<extra_id_k>`). Ids outside the
    /// vocabulary are an error.
    pub fn decode(ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if Self::is_byte(id) {
                out.push(id as u8);
            } else if let Some(k) = Self::sentinel_index(id) {
                out.extend_from_slice(format!("<extra_id_{k}>").as_bytes());
            } else {
                out.extend_from_slice(match id {
                    Self::PAD => b"<pad>".as_slice(),
                    Self::EOS => b"<eos>".as_slice(),
                    Self::MODE_S2S => b"[S2S]".as_slice(),
                    Self::MODE_NLU => b"[NLU]".as_slice(),
                    Self::MODE_NLG => b"[NLG]".as_slice(),
                    _ => return Err(TokenizerError::OutOfVocab(id)),
                });
            }
        }
        Ok(out)
    }

    /// Decode for display, replacing invalid UTF-8 with the replacement
    /// character. Only for logs and CLI output; use [`Vocab::decode`] when
    /// the exact bytes matter.
    pub fn decode_lossy(ids: &[TokenId]) -> String {
        match Self::decode(ids) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(_) => String::from("<invalid>"),
        }
    }

    /// Look up a special id by its rendered name.
    pub fn special_id(name: &str) -> Result<TokenId, TokenizerError> {
        match name {
            "<pad>" => Ok(Self::PAD),
            "<eos>" => Ok(Self::EOS),
            "[S2S]" => Ok(Self::MODE_S2S),
            "[NLU]" => Ok(Self::MODE_NLU),
            "[NLG]" => Ok(Self::MODE_NLG),
            _ => {
                if let Some(k) = name
                    .strip_prefix("<extra_id_")
                    .and_then(|rest| rest.strip_suffix('>'))
                    .and_then(|digits| digits.parse::<usize>().ok())
                {
                    Self::sentinel(k)
                } else {
                    Err(TokenizerError::UnknownSpecial(name.to_string()))
                }
            }
        }
    }

    /// Hash of the vocabulary layout, stored in checkpoints so a checkpoint
    /// written under a different layout is rejected at load time.
    pub fn layout_hash() -> String {
        use sha2::{Digest, Sha256};
        let desc = format!(
            "bytes={};pad={};eos={};s2s={};nlu={};nlg={};sentinels={};size={}",
            Self::BASE_SIZE,
            Self::PAD,
            Self::EOS,
            Self::MODE_S2S,
            Self::MODE_NLU,
            Self::MODE_NLG,
            Self::SENTINEL_COUNT,
            Self::SIZE
        );
        let digest = Sha256::digest(desc.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn vocabulary_layout_is_the_documented_one() {
        assert_eq!(Vocab::SIZE, 361);
        assert_eq!(Vocab::PAD, 256);
        assert_eq!(Vocab::EOS, 257);
        assert_eq!(Vocab::MODE_S2S, 258);
        assert_eq!(Vocab::MODE_NLU, 259);
        assert_eq!(Vocab::MODE_NLG, 260);
    }

    #[test]
    fn sentinels_fill_the_top_of_the_vocabulary() {
        assert_eq!(Vocab::sentinel(0), Ok(360));
        assert_eq!(Vocab::sentinel(1), Ok(359));
        assert_eq!(Vocab::sentinel(99), Ok(261));
        assert_eq!(Vocab::sentinel(100), Err(TokenizerError::SentinelIndex(100)));
        assert_eq!(Vocab::sentinel_index(360), Some(0));
        assert_eq!(Vocab::sentinel_index(261), Some(99));
        assert_eq!(Vocab::sentinel_index(260), None);
    }

    #[test]
    fn every_id_has_exactly_one_role() {
        for id in 0..Vocab::SIZE as TokenId {
            let roles = [
                Vocab::is_byte(id),
                id == Vocab::PAD,
                id == Vocab::EOS,
                Vocab::is_mode(id),
                Vocab::is_sentinel(id),
            ];
            let count = roles.iter().filter(|&&r| r).count();
            assert_eq!(count, 1, "id {id} matched {count} roles");
        }
    }

    #[test]
    fn encode_maps_bytes_to_their_own_ids() {
        assert_eq!(Vocab::encode(b""), Vec::<TokenId>::new());
        assert_eq!(Vocab::encode(b"ab"), vec![97, 98]);
    }

    #[test]
    fn decode_renders_bytes_and_special_names() {
        assert_eq!(Vocab::decode(&[97, 98]).unwrap(), b"ab");
        assert_eq!(Vocab::decode(&[258, 104, 105]).unwrap(), b"[S2S]hi");
        assert_eq!(Vocab::decode(&[360]).unwrap(), b"<extra_id_0>");
        assert_eq!(Vocab::decode(&[256, 257]).unwrap(), b"<pad><eos>");
        assert_eq!(Vocab::decode(&[361]), Err(TokenizerError::OutOfVocab(361)));
    }

    #[test]
    fn decode_inverts_encode_on_random_byte_strings() {
        let mut rng = StdRng::seed_from_u64(0x746f6b);
        for _ in 0..1000 {
            let len = rng.gen_range(0..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let ids = Vocab::encode(&bytes);
            assert!(ids.iter().all(|&id| Vocab::is_byte(id)));
            assert_eq!(Vocab::decode(&ids).unwrap(), bytes);
        }
    }

    #[test]
    fn special_id_parses_rendered_names() {
        assert_eq!(Vocab::special_id("<pad>"), Ok(Vocab::PAD));
        assert_eq!(Vocab::special_id("<eos>"), Ok(Vocab::EOS));
        assert_eq!(Vocab::special_id("[S2S]"), Ok(258));
        assert_eq!(Vocab::special_id("[NLU]"), Ok(259));
        assert_eq!(Vocab::special_id("[NLG]"), Ok(260));
        assert_eq!(Vocab::special_id("<extra_id_0>"), Ok(360));
        assert_eq!(Vocab::special_id("<extra_id_99>"), Ok(261));
        assert!(Vocab::special_id("<extra_id_100>").is_err());
        assert!(Vocab::special_id("<bogus>").is_err());
    }

    #[test]
    fn layout_hash_is_stable_within_a_build() {
        assert_eq!(Vocab::layout_hash(), Vocab::layout_hash());
        assert_eq!(Vocab::layout_hash().len(), 64);
    }
}
