//! Holds the `acceptance` test target; it has no library code of its own.
