use std::fmt;

use serde::{Deserialize, Serialize};

/// An exact retained/total fraction with a one-decimal percentage rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub struct Ratio {
    pub retained: u64,
    pub total: u64,
}

impl Ratio {
    pub fn new(retained: u64, total: u64) -> Self {
        Self { retained, total }
    }

    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.retained as f64 / self.total as f64)
    }

    /// Percentage in tenths of a percent, rounded half up on the exact
    /// rational value.
    pub fn percent_tenths(&self) -> Option<u64> {
        if self.total == 0 {
            return None;
        }
        let num = self.retained as u128 * 2000 + self.total as u128;
        Some((num / (2 * self.total as u128)) as u64)
    }

    /// `"55.6%"`, or `"n/a"` for an empty group.
    pub fn percent_string(&self) -> String {
        match self.percent_tenths() {
            Some(t) => format!("{}.{}%", t / 10, t % 10),
            None => "n/a".to_string(),
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({})", self.retained, self.total, self.percent_string())
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("Ratio", 3)?;
        st.serialize_field("retained", &self.retained)?;
        st.serialize_field("total", &self.total)?;
        st.serialize_field("percent", &self.percent_string())?;
        st.end()
    }
}
