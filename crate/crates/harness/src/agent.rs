//! Device agent: runs the certificate challenge on behalf of one device.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;

use ztf_cap::linking::{pop_message, Binding};
use ztf_cap::model::CapId;

use crate::client::{ApiFailure, ApiResult, CapClient};
use crate::pki::TestDevice;

/// How a response deviates from an honest one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tamper {
    #[default]
    None,
    /// Sign with another device's key.
    WrongKey,
    /// Flip one signature bit.
    FlipSignature,
    /// Sign a different CAP-id.
    WrongCapId,
}

#[derive(Debug, Clone)]
pub struct DeviceAgent {
    pub cap_id: CapId,
    pub agent_token: String,
    pub device: TestDevice,
}

#[derive(Debug, Clone)]
pub struct IssuedChallenge {
    pub challenge_id: String,
    pub nonce: Vec<u8>,
}

impl DeviceAgent {
    pub fn new(cap_id: CapId, agent_token: impl Into<String>, device: TestDevice) -> Self {
        Self { cap_id, agent_token: agent_token.into(), device }
    }

    pub async fn request_challenge(&self, client: &CapClient) -> ApiResult<IssuedChallenge> {
        let c = client.challenge(&self.agent_token).await?;
        let nonce = URL_SAFE_NO_PAD
            .decode(&c.nonce)
            .map_err(|e| ApiFailure::Transport(format!("nonce: {e}")))?;
        Ok(IssuedChallenge { challenge_id: c.challenge_id, nonce })
    }

    pub fn signature_for(&self, challenge: &IssuedChallenge, tamper: Tamper, other: Option<&TestDevice>) -> Vec<u8> {
        let message = pop_message(&challenge.nonce, &self.cap_id);
        match tamper {
            Tamper::None => self.device.sign(&message),
            Tamper::WrongKey => other.expect("WrongKey needs another device").sign(&message),
            Tamper::FlipSignature => {
                let mut sig = self.device.sign(&message);
                let mid = sig.len() / 2;
                sig[mid] ^= 0x01;
                sig
            }
            Tamper::WrongCapId => {
                let other_id = CapId::new(format!("{}-x", self.cap_id)).expect("suffix keeps id valid");
                self.device.sign(&pop_message(&challenge.nonce, &other_id))
            }
        }
    }

    pub async fn respond(&self, client: &CapClient, challenge: &IssuedChallenge, signature: &[u8]) -> ApiResult<Binding> {
        client.respond(&challenge.challenge_id, &self.device.chain, signature).await
    }

    /// Full honest challenge-response.
    pub async fn link(&self, client: &CapClient) -> ApiResult<Binding> {
        let challenge = self.request_challenge(client).await?;
        let sig = self.signature_for(&challenge, Tamper::None, None);
        self.respond(client, &challenge, &sig).await
    }
}
