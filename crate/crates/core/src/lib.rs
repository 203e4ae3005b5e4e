//! Cleaning of scientific question-answer corpora by iterated augmentation
//! and review.
//!
//! Each pair's answer is rewritten into a structured refined solution, then
//! reviewed for hidden assumptions and for derivation errors. The loop in
//! [`review_loop`] keeps refining until the reviews agree often enough in a
//! row or fail too often. Pairs whose loop passed and whose refined final
//! answer still matches the original are accepted.

pub mod agents;
pub mod baselines;
pub mod corpus;
pub mod consistency;
pub mod gateway;
pub mod partition;
pub mod review_loop;
pub mod solution;
