//! Self-contained HMAC bearer tokens.
//!
//! A token is `base64url(claims-JSON) + "." + base64url(HMAC-SHA256(key,
//! claims-JSON))`. Every issue gets a fresh random nonce, so tokens for
//! identical claims are still distinct on the wire.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

pub const KEY_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub path: String,
    pub expiry_unix: i64,
    pub nonce: String,
}

impl TokenClaims {
    /// Claims for `path` expiring `ttl_seconds` from now, with a fresh
    /// 128-bit nonce.
    pub fn new(path: impl Into<String>, ttl_seconds: i64) -> Self {
        let mut nonce = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut nonce);
        TokenClaims {
            path: path.into(),
            expiry_unix: now_unix() + ttl_seconds,
            nonce: hex::encode(nonce),
        }
    }
}

pub fn now_unix() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock before epoch")
        .as_secs() as i64
}

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("token expiry {expiry} is not in the future (now {now})")]
    ExpiryInPast { expiry: i64, now: i64 },
    #[error("token key must be {KEY_BYTES} bytes, got {0}")]
    BadKeyLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadFormat,
    BadMac,
    Expired,
    PathMismatch,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadFormat => "bad_format",
            RejectReason::BadMac => "bad_mac",
            RejectReason::Expired => "expired",
            RejectReason::PathMismatch => "path_mismatch",
        }
    }
}

fn check_key(key: &[u8]) -> Result<(), TokenError> {
    if key.len() != KEY_BYTES {
        return Err(TokenError::BadKeyLength(key.len()));
    }
    Ok(())
}

/// Sign claims into a wire token.
pub fn issue_token(key: &[u8], claims: &TokenClaims) -> Result<String, TokenError> {
    check_key(key)?;
    let now = now_unix();
    if claims.expiry_unix <= now {
        return Err(TokenError::ExpiryInPast { expiry: claims.expiry_unix, now });
    }
    let payload = serde_json::to_vec(claims).expect("claims serialize");
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts 32-byte key");
    mac.update(&payload);
    let tag = mac.finalize().into_bytes();
    Ok(format!("{}.{}", URL_SAFE_NO_PAD.encode(&payload), URL_SAFE_NO_PAD.encode(tag)))
}

/// Accept iff the MAC is valid, the expiry is in the future, and the claim
/// path is a prefix of the request path. MAC comparison is constant-time.
pub fn verify_token(
    token: &str,
    key: &[u8],
    request_path: &str,
    now: i64,
) -> Result<TokenClaims, RejectReason> {
    let (payload_b64, tag_b64) = token.split_once('.').ok_or(RejectReason::BadFormat)?;
    let payload = URL_SAFE_NO_PAD.decode(payload_b64).map_err(|_| RejectReason::BadFormat)?;
    let tag = URL_SAFE_NO_PAD.decode(tag_b64).map_err(|_| RejectReason::BadFormat)?;

    let mut mac = HmacSha256::new_from_slice(key).map_err(|_| RejectReason::BadMac)?;
    mac.update(&payload);
    mac.verify_slice(&tag).map_err(|_| RejectReason::BadMac)?;

    let claims: TokenClaims =
        serde_json::from_slice(&payload).map_err(|_| RejectReason::BadFormat)?;
    if claims.expiry_unix <= now {
        return Err(RejectReason::Expired);
    }
    if !request_path.starts_with(&claims.path) {
        return Err(RejectReason::PathMismatch);
    }
    Ok(claims)
}
