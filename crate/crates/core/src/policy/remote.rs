//! Remote policy over newline-delimited JSON on TCP.
//!
//! Each iteration sends one request line
//!
//! ```text
//! {"iteration":0,"state":{"p":[..],"v":[..],"q":[..],"omega":[..]},"rays":[..8]}
//! ```
//!
//! and expects one response line `{"dN":..,"dE":..,"dD":..,"q":[q0,q1,q2,q3]}`.
//! Responses must come back in request order.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Observation, PolicyError, PolicyOutput, RAY_COUNT};
use crate::dynamics::RigidBodyState;
use crate::geom::{Quaternion, Vec3};
use crate::mission::world::MAX_RAY_RANGE;
use crate::sensors::ideal_reading;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireState {
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub q: [f64; 4],
    pub omega: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub iteration: u64,
    pub state: WireState,
    pub rays: [f64; RAY_COUNT],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub image_b64: Option<String>,
}

impl PolicyRequest {
    pub fn from_observation(obs: &Observation) -> Self {
        let s = &obs.state;
        Self {
            iteration: obs.iteration,
            state: WireState {
                p: s.position.to_array(),
                v: s.velocity.to_array(),
                q: s.orientation.quaternion().to_array(),
                omega: s.angular_velocity.to_array(),
            },
            rays: obs.range_sensors,
            image_b64: None,
        }
    }

    /// Request sent by the conformance probe: level at rest, open rays.
    pub fn canonical() -> Self {
        let state = RigidBodyState::at_rest(Vec3::new(0.0, 0.0, -2.0));
        let imu = ideal_reading(&state, Vec3::new(0.0, 0.0, 9.81));
        let mut obs = Observation::open(state, imu, 0);
        obs.range_sensors = [MAX_RAY_RANGE; RAY_COUNT];
        Self::from_observation(&obs)
    }
}

fn number(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, PolicyError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(PolicyError::MissingField(key.into())),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| PolicyError::Malformed(format!("{key} is not a number"))),
    }
}

/// Parses and validates one response line.
pub fn parse_response(line: &str) -> Result<PolicyOutput, PolicyError> {
    let value: Value =
        serde_json::from_str(line.trim()).map_err(|e| PolicyError::Malformed(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| PolicyError::Malformed("response is not an object".into()))?;
    let d_n = number(obj, "dN")?;
    let d_e = number(obj, "dE")?;
    let d_d = number(obj, "dD")?;
    let q = match obj.get("q") {
        None | Some(Value::Null) => return Err(PolicyError::MissingField("q".into())),
        Some(Value::Array(items)) => items,
        Some(_) => return Err(PolicyError::Malformed("q is not an array".into())),
    };
    if q.len() < 4 {
        return Err(PolicyError::MissingField(format!("q has {} of 4 components", q.len())));
    }
    if q.len() > 4 {
        return Err(PolicyError::Malformed(format!("q has {} components", q.len())));
    }
    let mut c = [0.0; 4];
    for (slot, item) in c.iter_mut().zip(q) {
        *slot = item
            .as_f64()
            .ok_or_else(|| PolicyError::Malformed("q component is not a number".into()))?;
    }
    PolicyOutput::ingest(d_n, d_e, d_d, Quaternion::new(c[0], c[1], c[2], c[3]))
}

fn io_error(e: std::io::Error) -> PolicyError {
    match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => PolicyError::Timeout,
        _ => PolicyError::Io(e.to_string()),
    }
}

struct Connection {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Connection {
    fn open(host: &str, port: u16, timeout: Duration) -> Result<Self, PolicyError> {
        let addrs = (host, port)
            .to_socket_addrs()
            .map_err(|e| PolicyError::Io(format!("cannot resolve {host}:{port}: {e}")))?;
        let mut last = PolicyError::Io(format!("no address for {host}:{port}"));
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout)).map_err(io_error)?;
                    stream.set_write_timeout(Some(timeout)).map_err(io_error)?;
                    stream.set_nodelay(true).map_err(io_error)?;
                    let reader = BufReader::new(stream.try_clone().map_err(io_error)?);
                    return Ok(Self { writer: stream, reader });
                }
                Err(e) => last = io_error(e),
            }
        }
        Err(last)
    }

    fn exchange(&mut self, request: &PolicyRequest) -> Result<PolicyOutput, PolicyError> {
        let mut line = serde_json::to_string(request).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(io_error)?;
        self.writer.flush().map_err(io_error)?;
        let mut response = String::new();
        let n = self.reader.read_line(&mut response).map_err(io_error)?;
        if n == 0 {
            return Err(PolicyError::Io("server closed the connection".into()));
        }
        parse_response(&response)
    }
}

/// Blocking client. Connects on first use; any failure drops the connection.
pub struct RemotePolicy {
    host: String,
    port: u16,
    timeout: Duration,
    conn: Option<Connection>,
}

impl std::fmt::Debug for RemotePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePolicy")
            .field("host", &self.host)
            .field("port", &self.port)
            .field("timeout", &self.timeout)
            .field("connected", &self.conn.is_some())
            .finish()
    }
}

impl RemotePolicy {
    pub fn new(host: String, port: u16, timeout: Duration) -> Self {
        Self {
            host,
            port,
            timeout,
            conn: None,
        }
    }

    pub fn request(&mut self, request: &PolicyRequest) -> Result<PolicyOutput, PolicyError> {
        if self.conn.is_none() {
            self.conn = Some(Connection::open(&self.host, self.port, self.timeout)?);
        }
        let result = self.conn.as_mut().expect("connected above").exchange(request);
        if result.is_err() {
            self.conn = None;
        }
        result
    }

    pub fn next(&mut self, obs: &Observation) -> Result<PolicyOutput, PolicyError> {
        self.request(&PolicyRequest::from_observation(obs))
    }
}

/// Sends the canonical request once and validates the reply.
pub fn serve_check(host: &str, port: u16, timeout: Duration) -> Result<PolicyOutput, PolicyError> {
    RemotePolicy::new(host.to_owned(), port, timeout).request(&PolicyRequest::canonical())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;
    use std::thread;

    fn stub(reply: &'static str) -> u16 {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut writer = stream;
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 {
                let req: PolicyRequest = serde_json::from_str(&line).unwrap();
                assert_eq!(req.rays.len(), RAY_COUNT);
                if !reply.is_empty() {
                    writeln!(writer, "{reply}").unwrap();
                }
                line.clear();
            }
        });
        port
    }

    #[test]
    fn request_wire_shape() {
        let v: Value = serde_json::to_value(PolicyRequest::canonical()).unwrap();
        assert_eq!(v["iteration"], 0);
        assert_eq!(v["state"]["p"], serde_json::json!([0.0, 0.0, -2.0]));
        assert_eq!(v["state"]["q"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(v["rays"].as_array().unwrap().len(), 8);
        assert!(v.get("image_b64").is_none());
    }

    #[test]
    fn response_parsing() {
        assert!(parse_response(r#"{"dN":1,"dE":0,"dD":-0.5,"q":[1,0,0,0]}"#).is_ok());
        let e = parse_response(r#"{"dN":1,"dE":0,"dD":0,"q":[1,0,0]}"#).unwrap_err();
        assert_eq!(e.cause(), "missing field");
        let e = parse_response(r#"{"dN":1,"dE":0,"q":[1,0,0,0]}"#).unwrap_err();
        assert_eq!(e.cause(), "missing field");
        let e = parse_response(r#"{"dN":1,"dE":0,"dD":0,"q":[0.2,0,0,0]}"#).unwrap_err();
        assert_eq!(e.cause(), "quaternion norm");
        assert_eq!(parse_response("nope").unwrap_err().cause(), "malformed");
    }

    #[test]
    fn conforming_server_round_trip() {
        let port = stub(r#"{"dN":0.5,"dE":0.0,"dD":0.0,"q":[1.0,0.0,0.0,0.0]}"#);
        let mut p = RemotePolicy::new("127.0.0.1".into(), port, Duration::from_secs(2));
        for _ in 0..3 {
            assert_eq!(p.request(&PolicyRequest::canonical()).unwrap().d_n, 0.5);
        }
    }

    #[test]
    fn silent_server_times_out() {
        let port = stub("");
        let e = serve_check("127.0.0.1", port, Duration::from_millis(200)).unwrap_err();
        assert_eq!(e, PolicyError::Timeout);
    }
}
