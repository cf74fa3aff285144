//! Acceptance criteria live in .
