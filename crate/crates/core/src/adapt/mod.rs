//! Per-level adapter heads and their test-time fitting.

mod fit;
mod head;
mod losses;

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub use fit::{
    adapt_level, combined_loss, fit_adapters, fit_level, level_seed, AdaptedImage, AdaptedLevel,
    AdapterStack, CombinedLoss, ImageLevel, LevelEpisode, LevelFit, LossConfig, ProtoReason,
    SideTerms, SkippedTerm, ViewLevel,
};
pub use head::{adapter_forward, AdapterParams, ForwardCache, Mode, ParamGrads, BN_EPS};
pub use losses::{
    cosine, loss_nce, loss_proto, loss_proto_vectors, loss_stat, masked_prototypes, PairLoss,
    ProtoLoss, ProtoSkip, Prototypes, StatLoss,
};

const ARCHIVE_MAGIC: &[u8; 8] = b"TAFSADP1";

impl AdapterStack {
    /// Writes the stack as a binary archive (magic header + bincode body).
    pub fn save(&self, mut writer: impl Write) -> Result<()> {
        writer.write_all(ARCHIVE_MAGIC)?;
        bincode::serialize_into(&mut writer, self).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn load(mut reader: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Archive("not an adapter archive".into()));
        }
        bincode::deserialize_from(reader).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(file)
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
