//! Minimal IPv4 prefix arithmetic for overlay address planning.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// An IPv4 network in CIDR notation, stored in canonical (masked) form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv4Net {
    addr: Ipv4Addr,
    prefix_len: u8,
}

/// Error produced when parsing or deriving prefixes fails.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NetError {
    #[error("invalid CIDR prefix: {0}")]
    BadPrefix(String),
    #[error("prefix length {0} out of range")]
    BadLength(u8),
    #[error("subnet index {index} does not fit in {net}")]
    SubnetOutOfRange { net: String, index: u32 },
    #[error("host index {index} does not fit in {net}")]
    HostOutOfRange { net: String, index: u32 },
}

impl Ipv4Net {
    /// Builds a prefix, masking `addr` down to its network address.
    pub fn new(addr: Ipv4Addr, prefix_len: u8) -> Result<Self, NetError> {
        if prefix_len > 32 {
            return Err(NetError::BadLength(prefix_len));
        }
        let masked = u32::from(addr) & Self::mask(prefix_len);
        Ok(Self { addr: Ipv4Addr::from(masked), prefix_len })
    }

    fn mask(prefix_len: u8) -> u32 {
        if prefix_len == 0 {
            0
        } else {
            u32::MAX << (32 - prefix_len)
        }
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    /// Number of addresses covered by this prefix.
    pub fn size(&self) -> u64 {
        1u64 << (32 - self.prefix_len)
    }

    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        u32::from(addr) & Self::mask(self.prefix_len) == u32::from(self.addr)
    }

    /// True when the two prefixes share any address.
    pub fn overlaps(&self, other: &Ipv4Net) -> bool {
        self.contains(other.addr) || other.contains(self.addr)
    }

    /// The `index`-th child prefix of length `new_len`.
    pub fn subnet(&self, new_len: u8, index: u32) -> Result<Ipv4Net, NetError> {
        if new_len > 32 || new_len < self.prefix_len {
            return Err(NetError::BadLength(new_len));
        }
        let slots = 1u64 << (new_len - self.prefix_len);
        if u64::from(index) >= slots {
            return Err(NetError::SubnetOutOfRange { net: self.to_string(), index });
        }
        let step = 1u32 << (32 - new_len);
        let base = u32::from(self.addr) + index * step;
        Ok(Ipv4Net { addr: Ipv4Addr::from(base), prefix_len: new_len })
    }

    /// How many child prefixes of `new_len` fit inside this one.
    pub fn subnet_count(&self, new_len: u8) -> u64 {
        if new_len > 32 || new_len < self.prefix_len {
            0
        } else {
            1u64 << (new_len - self.prefix_len)
        }
    }

    /// The `index`-th address within the prefix (0 is the network address).
    pub fn host(&self, index: u32) -> Result<Ipv4Addr, NetError> {
        if u64::from(index) >= self.size() {
            return Err(NetError::HostOutOfRange { net: self.to_string(), index });
        }
        Ok(Ipv4Addr::from(u32::from(self.addr) + index))
    }
}

impl fmt::Display for Ipv4Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix_len)
    }
}

impl FromStr for Ipv4Net {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| NetError::BadPrefix(s.to_string()))?;
        let addr: Ipv4Addr =
            addr.parse().map_err(|_| NetError::BadPrefix(s.to_string()))?;
        let len: u8 = len.parse().map_err(|_| NetError::BadPrefix(s.to_string()))?;
        Ipv4Net::new(addr, len)
    }
}

impl Serialize for Ipv4Net {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ipv4Net {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e: NetError| D::Error::custom(e.to_string()))
    }
}
