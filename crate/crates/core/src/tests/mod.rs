//! Cross-module properties and training-protocol checks.

mod properties;
