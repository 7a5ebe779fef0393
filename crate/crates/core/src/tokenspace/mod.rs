//! Control-token vocabulary and span-aware encoding.

mod encode;
mod tokenizer;

pub use encode::{encode_with_spans, EncodeOptions, EncodedExample, Region};
pub use tokenizer::{
    extend_vocab, Token, Tokenizer, WordTokenizer, CONTROL_TOKENS, EOS_TOKEN, PAD_TOKEN,
};
