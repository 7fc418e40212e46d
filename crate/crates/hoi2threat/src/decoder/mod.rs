//! Tag-guided caption decoder: tokenizer, tag serialization, and the
//! autoregressive transformer head.

mod model;
mod tags;
mod tokenizer;

pub use model::{
    caption_trainable_params, generate, init_decoder, lm_loss, teacher_forced_step, DecoderConfig,
    GenerationConfig, GenerationMode,
};
pub use tags::{order_triples, serialize_hoi_tags, tag_string, triple_words};
pub use tokenizer::{Tokenizer, BOS, EOS, HOI, PAD, SEP, SPECIALS, UNK};
