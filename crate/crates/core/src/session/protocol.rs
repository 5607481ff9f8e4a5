//! Interactive session over a WebSocket. Messages are JSON text frames
//! tagged by `type`; the schema is documented in `docs/protocol.md`.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::Session;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::render::{Camera, ChannelSettings};
use crate::transfer::TransferFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WireChannel {
    pub slot: u32,
    pub dataset_channel: u32,
    pub tf_control_points: TransferFunction,
    pub level_range: [u32; 2],
    #[serde(default)]
    pub importance: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetCamera {
        position: [f32; 3],
        target: [f32; 3],
        up: [f32; 3],
        fov: f32,
    },
    SetChannels {
        channels: Vec<WireChannel>,
    },
    #[serde(rename_all = "camelCase")]
    SetConfig {
        #[serde(default)]
        step_size: Option<f32>,
        #[serde(default)]
        request_cap: Option<usize>,
    },
}

impl ClientMessage {
    pub fn camera(cam: &Camera) -> Self {
        ClientMessage::SetCamera {
            position: cam.position.to_array(),
            target: cam.target.to_array(),
            up: cam.up.to_array(),
            fov: cam.fov,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    #[serde(rename_all = "camelCase")]
    Ready {
        dataset_channels: u32,
        channel_slots: u32,
        levels: u32,
    },
    #[serde(rename_all = "camelCase")]
    Frame {
        frame_id: u64,
        png_bytes: String,
    },
    #[serde(rename_all = "camelCase")]
    Stats {
        frame_id: u64,
        ms_per_frame: f64,
        required_bricks: usize,
        cache_bytes: usize,
        pending_requests: usize,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    /// Decoded PNG of a `frame` message.
    pub fn png(&self) -> Option<Vec<u8>> {
        match self {
            ServerMessage::Frame { png_bytes, .. } => STANDARD.decode(png_bytes).ok(),
            _ => None,
        }
    }
}

/// Camera and channel list steered by the client.
#[derive(Clone, Debug)]
pub struct ViewState {
    pub camera: Camera,
    pub channels: Vec<ChannelSettings>,
}

fn v3(a: [f32; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn apply(msg: ClientMessage, session: &mut Session, view: &mut ViewState) -> Result<()> {
    match msg {
        ClientMessage::SetCamera {
            position,
            target,
            up,
            fov,
        } => {
            let cam = Camera {
                position: v3(position),
                target: v3(target),
                up: v3(up),
                fov,
            };
            cam.validate()?;
            view.camera = cam;
        }
        ClientMessage::SetChannels { channels } => {
            let m = session.config().mapping.len() as u32;
            let k = session.paging().config().k();
            let mut list = Vec::with_capacity(channels.len());
            for w in &channels {
                if w.slot >= m {
                    return Err(Error::Protocol(format!(
                        "slot {} out of range ({m} slots)",
                        w.slot
                    )));
                }
                if w.dataset_channel >= session.manifest().channels {
                    return Err(Error::ChannelRange {
                        channel: w.dataset_channel,
                        count: session.manifest().channels,
                    });
                }
                if w.level_range[0] > w.level_range[1] || w.level_range[1] >= k {
                    return Err(Error::Protocol(format!(
                        "bad level range {:?}",
                        w.level_range
                    )));
                }
                list.push(ChannelSettings {
                    slot: w.slot,
                    tf: w.tf_control_points.clone(),
                    level_range: w.level_range,
                    importance: w.importance,
                });
            }
            for w in &channels {
                if session.paging().channel_mapping()[w.slot as usize] != w.dataset_channel {
                    session.swap_channel(w.slot, w.dataset_channel)?;
                }
            }
            view.channels = list;
        }
        ClientMessage::SetConfig {
            step_size,
            request_cap,
        } => {
            let mut rc = session.render_config().clone();
            if let Some(s) = step_size {
                rc.base_step = s;
            }
            if let Some(c) = request_cap {
                rc.max_requests = c;
            }
            session.set_render_config(rc)?;
        }
    }
    Ok(())
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> Result<()> {
    let text = serde_json::to_string(msg)?;
    ws.send(Message::text(text))
        .map_err(|e| Error::Protocol(e.to_string()))
}

/// Serve one client until it disconnects. Frames are rendered while the
/// session has not converged or after any control change; otherwise the
/// loop idles on the socket.
pub fn run_connection(
    stream: TcpStream,
    session: &mut Session,
    view: &mut ViewState,
) -> Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Protocol(e.to_string()))?;
    let pc = session.paging().config();
    let ready = ServerMessage::Ready {
        dataset_channels: session.manifest().channels,
        channel_slots: pc.channel_slots,
        levels: pc.k(),
    };
    send(&mut ws, &ready)?;
    let mut dirty = true;
    loop {
        let idle = !dirty && session.converged();
        let timeout = if idle { 100 } else { 1 };
        ws.get_mut()
            .set_read_timeout(Some(Duration::from_millis(timeout)))
            .map_err(|e| Error::io("socket", e))?;
        match ws.read() {
            Ok(Message::Text(t)) => {
                match serde_json::from_str::<ClientMessage>(t.as_str())
                    .map_err(Error::from)
                    .and_then(|m| apply(m, session, view))
                {
                    Ok(()) => dirty = true,
                    Err(e) => send(
                        &mut ws,
                        &ServerMessage::Error {
                            message: e.to_string(),
                        },
                    )?,
                }
                continue;
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                break;
            }
            Ok(_) => continue,
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(Error::Protocol(e.to_string())),
        }
        if idle {
            continue;
        }
        let out = session.step_frame(&view.camera, &view.channels)?;
        dirty = false;
        let rec = session.history().last().expect("frame recorded").clone();
        let png = out.image.to_png();
        send(
            &mut ws,
            &ServerMessage::Frame {
                frame_id: rec.frame,
                png_bytes: STANDARD.encode(png),
            },
        )?;
        send(
            &mut ws,
            &ServerMessage::Stats {
                frame_id: rec.frame,
                ms_per_frame: rec.ms,
                required_bricks: rec.required_bricks,
                cache_bytes: rec.cache_bytes,
                pending_requests: rec.pending,
            },
        )?;
    }
    Ok(())
}

/// Accept clients one after another on `listener`. Stops after
/// `max_clients` connections if given.
pub fn serve(
    listener: TcpListener,
    session: &mut Session,
    view: &mut ViewState,
    max_clients: Option<usize>,
) -> Result<()> {
    for (served, stream) in (1..).zip(listener.incoming()) {
        let stream = stream.map_err(|e| Error::io("listener", e))?;
        if let Err(e) = run_connection(stream, session, view) {
            log::warn!("client session ended: {e}");
        }
        if max_clients.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

/// Blocking protocol client, used by tests and scripted drivers.
pub struct ProtocolClient {
    ws: WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>,
}

impl ProtocolClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| Error::io("address", e))?
            .next()
            .ok_or_else(|| Error::Protocol("no address".into()))?;
        let (ws, _) = tungstenite::connect(format!("ws://{addr}/session"))
            .map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(Self { ws })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        let text = serde_json::to_string(msg)?;
        self.ws
            .send(Message::text(text))
            .map_err(|e| Error::Protocol(e.to_string()))
    }

    /// Send an arbitrary text frame.
    pub fn send_raw(&mut self, text: &str) -> Result<()> {
        self.ws
            .send(Message::text(text))
            .map_err(|e| Error::Protocol(e.to_string()))
    }

    /// Next engine message, skipping control frames.
    pub fn recv(&mut self) -> Result<ServerMessage> {
        loop {
            match self.ws.read().map_err(|e| Error::Protocol(e.to_string()))? {
                Message::Text(t) => return Ok(serde_json::from_str(t.as_str())?),
                Message::Close(_) => return Err(Error::Protocol("closed by server".into())),
                _ => {}
            }
        }
    }

    /// Like [`recv`](Self::recv) but gives up after `timeout` of silence.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<ServerMessage>> {
        if let tungstenite::stream::MaybeTlsStream::Plain(s) = self.ws.get_mut() {
            s.set_read_timeout(Some(timeout))
                .map_err(|e| Error::io("socket", e))?;
        }
        let r = loop {
            match self.ws.read() {
                Ok(Message::Text(t)) => break Ok(Some(serde_json::from_str(t.as_str())?)),
                Ok(Message::Close(_)) => break Err(Error::Protocol("closed by server".into())),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
                {
                    break Ok(None)
                }
                Err(e) => break Err(Error::Protocol(e.to_string())),
            }
        };
        if let tungstenite::stream::MaybeTlsStream::Plain(s) = self.ws.get_mut() {
            s.set_read_timeout(None)
                .map_err(|e| Error::io("socket", e))?;
        }
        r
    }

    pub fn close(mut self) -> Result<()> {
        self.ws
            .close(None)
            .map_err(|e| Error::Protocol(e.to_string()))?;
        loop {
            match self.ws.read() {
                Ok(_) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Ok(())
                }
                Err(tungstenite::Error::Io(_)) => return Ok(()),
                Err(e) => return Err(Error::Protocol(e.to_string())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_use_documented_tags() {
        let m: ClientMessage = serde_json::from_str(
            r#"{"type":"set_channels","channels":[{"slot":0,"datasetChannel":2,
                "tfControlPoints":[[0,0,0,0,0],[255,1,1,1,1]],"levelRange":[0,3],"importance":1}]}"#,
        )
        .unwrap();
        match m {
            ClientMessage::SetChannels { channels } => {
                assert_eq!(channels[0].dataset_channel, 2);
                assert_eq!(channels[0].level_range, [0, 3]);
            }
            _ => panic!("wrong variant"),
        }
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"set_config","requestCap":64}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::SetConfig {
                step_size: None,
                request_cap: Some(64)
            }
        );
        let s = serde_json::to_value(ServerMessage::Stats {
            frame_id: 3,
            ms_per_frame: 1.5,
            required_bricks: 2,
            cache_bytes: 4,
            pending_requests: 0,
        })
        .unwrap();
        assert_eq!(s["type"], "stats");
        assert_eq!(s["frameId"], 3);
        assert_eq!(s["pendingRequests"], 0);
    }

    #[test]
    fn unknown_message_is_rejected() {
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"reboot"}"#).is_err());
    }
}
