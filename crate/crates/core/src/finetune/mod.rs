//! Downstream fine-tuning for token classification (NER), extractive QA and
//! relation classification, with multi-seed reporting.

mod data;
mod metrics;
mod report;
mod train;

pub use data::{
    bio_spans, char_len, char_slice, conll_to_examples, read_conll, read_jsonl, read_task_file, write_conll, write_jsonl, write_task_file,
    write_task_records, AnnotatedExample, Annotation, NerRecord, QaAnswer, QaRecord, ReRecord, Task, TaskDataset,
};
pub use metrics::{ner_f1, normalize_answer, qa_f1, re_f1, Entity, Prf};
pub use report::{delta_pct, mean_sd, render_table, SeedScore, TaskReport};
pub use train::{
    finetune_seed, finetune_task, label_set, score, task_model_from_checkpoint, FinetuneConfig, Prediction, SeedRun, TaskModel,
};
