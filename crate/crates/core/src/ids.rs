//! Session-scoped identifiers. Each is a counter rendered with a short
//! prefix (`p7`, `c3`, ...) so ids stay readable in logs and URLs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

macro_rules! prefixed_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u32);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            pub fn next(self) -> Self {
                Self(self.0 + 1)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.0)
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .and_then(|n| n.parse().ok())
                    .map($name)
                    .ok_or_else(|| format!("invalid {} {s:?}", stringify!($name)))
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

prefixed_id!(ProxyId, "p");
prefixed_id!(
    /// One MLLM dialogue; stable for the lifetime of a session.
    ConversationId,
    "c"
);
prefixed_id!(WidgetId, "w");
prefixed_id!(JobId, "j");
prefixed_id!(RequestId, "r");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parse_roundtrip() {
        let id = ProxyId(12);
        assert_eq!(id.to_string(), "p12");
        assert_eq!("p12".parse::<ProxyId>().unwrap(), id);
        assert!("c12".parse::<ProxyId>().is_err());
        assert_eq!(serde_json::to_string(&ConversationId(3)).unwrap(), "\"c3\"");
    }
}
