pub mod bip;
pub mod coreset;
pub mod examples;
pub mod fastbat;
pub mod irm;
pub mod maml;
pub mod quad;
pub mod reweight;
