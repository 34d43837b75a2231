//! Dataset ingestion, batching and the synthetic copying task.

mod batch;
mod cache;
mod copy_task;
mod ts;

pub use batch::{
    align, batch_indices, prepare_batches, ChannelStats, Dataset, DatasetMeta, Normalization, PadMode, SeriesBatch,
    STD_EPS,
};
pub use cache::{read_cache, write_cache};
pub use copy_task::{generate_selective_copy, SelectiveCopyData, SelectiveCopySpec};
pub use ts::{parse_csv, parse_ts, read_csv, read_ts, to_ts_string, RawSeries, TsFile};
