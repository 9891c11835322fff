//! Glue between the front-end, the network and the scoring back-end.

use crate::error::Result;
use crate::frontend::{Fbank, Waveform};
use crate::model::Model;
use crate::scoring::{eer, min_dcf, segment_utterance, UtteranceEmbedding, C_FA, C_MISS, P_TARGET};

/// Segments an utterance, embeds every segment in one eval-mode batch and
/// averages them.
pub fn embed_utterance(model: &Model<f32>, fbank: &Fbank, w: &Waveform) -> Result<UtteranceEmbedding> {
    let feats = segment_utterance(w)?
        .iter()
        .map(|s| fbank.compute(s))
        .collect::<Result<Vec<_>>>()?;
    let e = model.config().embed_dim;
    let out = model.embed_batch(&feats)?;
    UtteranceEmbedding::from_segments(out.data().chunks(e).map(<[f32]>::to_vec).collect())
}

/// EER and minDCF at the default operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub eer: f64,
    pub min_dcf: f64,
}

pub fn metrics(scores: &[(f64, bool)]) -> Result<Metrics> {
    Ok(Metrics {
        eer: eer(scores)?,
        min_dcf: min_dcf(scores, P_TARGET, C_MISS, C_FA)?,
    })
}
