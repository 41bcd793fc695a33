//! Procedural corpora and planted-spurious oracles.

mod bench;
mod corpus;
mod plant;
mod teacher;

pub use bench::{
    benchmark_suite, detector_predictions, planted_benchmark, score_benchmark, Benchmark,
    DetectorScore, BENCH_HEADS, BENCH_LAYERS, BENCH_SIDE, DETECTORS,
};
pub use corpus::{gen_corpus, generate, Generator, SynthImage, GRAIN};
pub use plant::{
    plant_attention, plant_feature_maps, Margins, PlantSpec, PlantTruth, PlantedMaps, PLANT_DIM,
};
pub use teacher::{
    apply_surgery, make_spurious_teacher, plan_surgery, SpuriousTeacher, SurgeryPlan, TeacherSpec,
};
