use reqwest::blocking::{Client, RequestBuilder};
use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
    #[serde(default)]
    message: String,
}

pub struct Api {
    base: Url,
    token: String,
    http: Client,
}

impl Api {
    pub fn new(endpoint: &str, token: &str) -> Result<Self, CliError> {
        let base = Url::parse(endpoint).map_err(|e| CliError::Usage(format!("bad endpoint {endpoint:?}: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(CliError::Usage(format!("bad endpoint {endpoint:?}")));
        }
        let http = Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .map_err(|e| CliError::Transport(e.to_string()))?;
        Ok(Self { base, token: token.to_owned(), http })
    }

    /// Builds `<endpoint>/<segments...>`, percent-encoding each segment.
    pub fn url(&self, segments: &[&str], query: &[(&str, String)]) -> Url {
        let mut url = self.base.clone();
        {
            let mut path = url.path_segments_mut().expect("checked in new");
            path.pop_if_empty();
            path.extend(segments);
        }
        if !query.is_empty() {
            url.query_pairs_mut().extend_pairs(query.iter().map(|(k, v)| (*k, v.as_str())));
        }
        url
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, CliError> {
        let resp = req.bearer_auth(&self.token).send().map_err(|e| CliError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return resp.json().map_err(|e| CliError::Transport(format!("unexpected response body: {e}")));
        }
        let text = resp.text().unwrap_or_default();
        let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.message),
            Err(_) => (status.as_str().to_owned(), text),
        };
        Err(match status {
            StatusCode::UNAUTHORIZED => CliError::Auth { code, message },
            s if s.is_server_error() => CliError::Server { code, message },
            _ => CliError::Domain { code, message },
        })
    }

    pub fn get<T: DeserializeOwned>(&self, segments: &[&str], query: &[(&str, String)]) -> Result<T, CliError> {
        self.send(self.http.get(self.url(segments, query)))
    }

    pub fn post<T: DeserializeOwned>(&self, segments: &[&str], body: &impl Serialize) -> Result<T, CliError> {
        self.send(self.http.post(self.url(segments, &[])).json(body))
    }

    pub fn post_text<T: DeserializeOwned>(&self, segments: &[&str], body: String) -> Result<T, CliError> {
        self.send(self.http.post(self.url(segments, &[])).header("content-type", "text/csv").body(body))
    }

    pub fn delete<T: DeserializeOwned>(&self, segments: &[&str]) -> Result<T, CliError> {
        self.send(self.http.delete(self.url(segments, &[])))
    }
}
