pub mod clock;
pub mod control;
pub mod experiment;
pub mod knowledge;
pub mod react;
pub mod relay;
pub mod tools;
