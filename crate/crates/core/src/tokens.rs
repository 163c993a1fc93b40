//! Reserved token ids and caption-to-sequence encoding.

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const MASK: u32 = 2;
/// Stands for the retrieval instruction prefixed to every caption fed to the text encoder.
pub const SYSTEM_PROMPT: u32 = 3;
pub const N_RESERVED: u32 = 4;

/// Prefixes the prompt token (optionally), appends EOS, and truncates to `max_len`
/// keeping the EOS.
pub fn encode_caption(content: &[u32], with_prompt: bool, max_len: usize) -> Vec<u32> {
    let mut seq = Vec::with_capacity(content.len() + 2);
    if with_prompt {
        seq.push(SYSTEM_PROMPT);
    }
    seq.extend_from_slice(content);
    seq.truncate(max_len.saturating_sub(1));
    seq.push(EOS);
    seq
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    /// `true` marks a padded position.
    pub pad_mask: Vec<bool>,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; seqs.len() * len];
        let mut pad_mask = vec![true; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.as_ref().iter().enumerate() {
                ids[b * len + t] = tok;
                pad_mask[b * len + t] = false;
            }
        }
        Self {
            batch: seqs.len(),
            len,
            ids,
            pad_mask,
        }
    }

    pub fn get(&self, b: usize, t: usize) -> (u32, bool) {
        (self.ids[b * self.len + t], self.pad_mask[b * self.len + t])
    }
}
