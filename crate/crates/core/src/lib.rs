//! Chord recognition refinement over multi-tool MIR outputs.
//!
//! Upstream tools (source separation, chord recognition on several stems,
//! local key estimation, beat tracking) write plain lab files. This crate
//! parses them into [`timeline::Timeline`]s of Harte labels, runs a five
//! stage correction pipeline ([`refine`]) backed either by a deterministic
//! rulebook or a chat-completion model, and scores results with the seven
//! framewise chord metrics ([`metrics`]).

pub mod beat_align;
pub mod corpus;
pub mod gateway;
pub mod harte;
pub mod metrics;
pub mod parallel;
pub mod refine;
pub mod report;
pub mod synth;
pub mod theory;
pub mod timeline;

pub use harte::{format_chord, parse_chord, ChordLabel, PitchClass, Quality};
pub use metrics::{evaluate_corpus, evaluate_pair, EvalScores, Metric};
pub use parallel::Execution;
pub use theory::{Key, Mode};
pub use timeline::{Segment, Timeline};
