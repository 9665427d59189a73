use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use nalgebra::Vector3;
use tokio::io::{AsyncReadExt, AsyncWriteExt};

use needlesim::evaluation::{steer, SteerConfig};
use needlesim::phantom::{layered_slab_volume, DegradeSpec, PhantomSpec};
use needlesim::planner::CandidatePath;
use needlesim::study::{Case, StudyConfig};
use needlesim::tissue::ThresholdSet;
use needlesim::volume::TissueLabel::{self, *};
use needlesim_trainer::protocol::{Envelope, ErrorKind, NeedleState, ProviderChoice, Reply, Request};
use needlesim_trainer::{process_text, serve_on, Registry, TrainerSession, VolumeEntry};

fn slab_entry(name: &str, layers: &[(TissueLabel, usize)]) -> VolumeEntry {
    let (v, _) = layered_slab_volume(layers, 1.0).unwrap();
    let partial = v.labels.clone();
    let cfg = StudyConfig {
        thresholds: Some(ThresholdSet::new(-500.0, -30.0, 200.0, 300.0).unwrap()),
        ..StudyConfig::default()
    };
    VolumeEntry::new(Case::new(name, v, partial).unwrap(), cfg).unwrap()
}

fn small_phantom_entry() -> VolumeEntry {
    let spec = PhantomSpec {
        dims: [64, 56, 40],
        spacing: [2.0, 2.0, 2.0],
        ..PhantomSpec::default()
    };
    let case = Case::phantom("small", &spec, &DegradeSpec::default()).unwrap();
    VolumeEntry::new(case, StudyConfig::default()).unwrap()
}

fn registry() -> Arc<Registry> {
    let mut r = Registry::new();
    r.insert(slab_entry("bile", &[(Air, 3), (Skin, 2), (FatSoft, 4), (Liver, 4), (HepBile, 6)]));
    r.insert(slab_entry("vessel", &[(Air, 3), (Skin, 2), (FatSoft, 4), (Liver, 4), (HepBlood, 6)]));
    Arc::new(r)
}

fn state(r: Reply) -> NeedleState {
    match r {
        Reply::State(s) => s,
        other => panic!("expected a state push, got {other:?}"),
    }
}

fn error_kind(r: Reply) -> ErrorKind {
    match r {
        Reply::Error { kind, .. } => kind,
        other => panic!("expected an error, got {other:?}"),
    }
}

fn start(s: &mut TrainerSession, volume: &str) {
    let r = s.handle(Request::SessionStart {
        volume: volume.into(),
        provider: ProviderChoice::Full,
    });
    assert!(matches!(r, Reply::SessionStarted { .. }), "{r:?}");
}

fn entry_along_x(s: &mut TrainerSession) {
    state(s.handle(Request::EntrySet {
        point: [0.0, 1.0, 1.0],
        direction: [1.0, 0.0, 0.0],
    }));
}

#[test]
fn commands_out_of_order_are_rejected() {
    let mut s = TrainerSession::new(registry());
    assert_eq!(error_kind(s.handle(Request::NeedleAdvance { mm: 1.0 })), ErrorKind::BadState);
    let r = s.handle(Request::SessionStart {
        volume: "nope".into(),
        provider: ProviderChoice::Full,
    });
    assert_eq!(error_kind(r), ErrorKind::UnknownVolume);
    start(&mut s, "bile");
    assert_eq!(error_kind(s.handle(Request::NeedleAdvance { mm: 1.0 })), ErrorKind::BadState);
    assert_eq!(error_kind(s.handle(Request::AttemptFinish {})), ErrorKind::BadState);
    entry_along_x(&mut s);
    assert_eq!(error_kind(s.handle(Request::NeedleAdvance { mm: -1.0 })), ErrorKind::BadMessage);
    assert_eq!(error_kind(s.handle(Request::NeedleRetract { mm: 1.0 })), ErrorKind::OutOfBounds);
    assert_eq!(error_kind(s.handle(Request::NeedleAdvance { mm: 500.0 })), ErrorKind::OutOfBounds);
    // a rejected command leaves the needle where it was
    assert_eq!(state(s.handle(Request::NeedleAdvance { mm: 0.0 })).depth, 0.0);
}

#[test]
fn target_turns_green_and_vessel_turns_red() {
    let mut s = TrainerSession::new(registry());
    start(&mut s, "bile");
    entry_along_x(&mut s);
    let st = state(s.handle(Request::NeedleAdvance { mm: 15.0 }));
    assert_eq!(st.tissue, HepBile);
    assert!(st.flags.target && !st.flags.risk);

    start(&mut s, "vessel");
    entry_along_x(&mut s);
    let st = state(s.handle(Request::NeedleAdvance { mm: 15.0 }));
    assert!(st.flags.risk && !st.flags.target);
    assert!(st.events.contains(&needlesim::engine::Event::RiskContact { tissue: HepBlood }));
}

#[test]
fn chunked_advances_replay_the_batch_steer() {
    let reg = registry();
    let cls = reg.get("bile").unwrap().arms.reference.clone();
    let cfg = SteerConfig {
        step: 0.09,
        standoff: 0.0,
    };
    let path = CandidatePath::straight(Vector3::new(0.0, 1.0, 1.0), Vector3::x(), 17.0);
    let batch = steer(&path, cls, &Default::default(), &cfg).unwrap();

    let mut s = TrainerSession::new(reg);
    start(&mut s, "bile");
    entry_along_x(&mut s);
    let mut forces = Vec::new();
    let total = batch.samples.len() as f64 * 0.09;
    let mut done = 0.0;
    let mut i = 0;
    while done < total - 1e-9 {
        // uneven chunks, like mouse-wheel ticks
        let mm = [0.5f64, 0.37, 1.0, 0.05][i % 4].min(total - done);
        done += mm;
        i += 1;
        forces.extend(state(s.handle(Request::NeedleAdvance { mm })).samples.iter().map(|x| x.force));
    }
    let expected: Vec<f64> = batch.samples.iter().map(|x| x.force).collect();
    assert_eq!(forces.len(), expected.len());
    assert!(forces.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()));

    // retraction walks back and stays within the local sustain force
    let back = state(s.handle(Request::NeedleRetract { mm: 10.0 }));
    assert!(back.samples.iter().all(|x| x.force <= 1.2 + 1e-12));
}

#[test]
fn sessions_are_isolated() {
    let reg = registry();
    let mut a = TrainerSession::new(reg.clone());
    let mut b = TrainerSession::new(reg);
    assert_ne!(a.id, b.id);
    start(&mut a, "bile");
    start(&mut b, "bile");
    entry_along_x(&mut a);
    entry_along_x(&mut b);
    state(a.handle(Request::NeedleAdvance { mm: 8.0 }));
    let sb = state(b.handle(Request::NeedleAdvance { mm: 0.0 }));
    assert_eq!(sb.depth, 0.0);
}

#[test]
fn planned_path_round_trip_matches_steer_and_score() {
    let entry = small_phantom_entry();
    let paths = entry.reference_paths().unwrap().to_vec();
    assert!(!paths.is_empty());
    let cls = entry.arms.reference.clone();
    let mut r = Registry::new();
    r.insert(entry);
    let mut s = TrainerSession::new(Arc::new(r));
    start(&mut s, "small");

    let p = &paths[paths.len() / 2];
    let cfg = SteerConfig {
        step: 0.09,
        standoff: 0.0,
    };
    let batch = steer(p, cls, &Default::default(), &cfg).unwrap();
    state(s.handle(Request::EntrySet {
        point: p.origin,
        direction: p.direction,
    }));
    let mut forces = Vec::new();
    let mut last = None;
    let n = batch.samples.len();
    for chunk in 0..n.div_ceil(10) {
        let k = (n - chunk * 10).min(10);
        let st = state(s.handle(Request::NeedleAdvance { mm: k as f64 * 0.09 }));
        forces.extend(st.samples.iter().map(|x| x.force));
        last = Some(st);
    }
    assert_eq!(forces.len(), n);
    assert!(forces.iter().zip(&batch.samples).all(|(a, b)| a.to_bits() == b.force.to_bits()));
    assert!(last.unwrap().flags.target);

    match s.handle(Request::AttemptFinish {}) {
        Reply::Score {
            score,
            reference,
            entry_voxel,
            tip_voxel,
        } => {
            assert_eq!(entry_voxel, p.skin_voxel);
            assert_eq!(tip_voxel, p.target_voxel);
            assert_eq!(score.q, p.q);
            let m = reference.unwrap();
            assert_eq!((m.id, m.q), (p.id, p.q));
            assert!(m.distance < 1e-9);
        }
        other => panic!("{other:?}"),
    }
    match s.handle(Request::PathsReference { limit: Some(3) }) {
        Reply::Paths { total, paths: got } => {
            assert_eq!(total, paths.len());
            assert_eq!(got, paths[..3].to_vec());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn text_frames_carry_the_version() {
    let mut s = TrainerSession::new(registry());
    let out = process_text(&mut s, r#"{"v":1,"type":"session.start","volume":"bile"}"#);
    let env: Envelope<Reply> = serde_json::from_str(&out).unwrap();
    assert_eq!(env.v, 1);
    assert!(matches!(env.body, Reply::SessionStarted { .. }));
    let out = process_text(&mut s, r#"{"v":9,"type":"attempt.finish"}"#);
    assert!(out.contains(r#""kind":"bad_message""#));
    let out = process_text(&mut s, r#"{"v":1,"type":"slice.get","axis":"z","index":1,"overlay":true}"#);
    assert!(out.contains(r#""type":"slice""#) && out.contains(r#""overlay""#));
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn exchange(ws: &mut Ws, m: &str) -> Reply {
    ws.send(tokio_tungstenite::tungstenite::Message::Text(m.to_string().into()))
        .await
        .unwrap();
    let msg = ws.next().await.unwrap().unwrap();
    let env: Envelope<Reply> = serde_json::from_str(msg.to_text().unwrap()).unwrap();
    assert_eq!(env.v, 1);
    env.body
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_and_http_endpoints() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_on(listener, registry()));

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/session")).await.unwrap();
    assert!(matches!(
        exchange(&mut ws, r#"{"v":1,"type":"session.start","volume":"bile","provider":"partial"}"#).await,
        Reply::SessionStarted { provider: ProviderChoice::Partial, .. }
    ));
    exchange(&mut ws, r#"{"v":1,"type":"entry.set","point":[0,1,1],"direction":[1,0,0]}"#).await;
    let st = state(exchange(&mut ws, r#"{"v":1,"type":"needle.advance","mm":15}"#).await);
    assert!(st.flags.target);

    let mut tcp = tokio::net::TcpStream::connect(addr).await.unwrap();
    tcp.write_all(b"GET /slice?volume=bile&axis=z&index=1 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    tcp.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let body = resp.split("\r\n\r\n").nth(1).unwrap();
    let env: Envelope<Reply> = serde_json::from_str(body).unwrap();
    assert!(matches!(env.body, Reply::Slice(ref sl) if sl.width == 19 && sl.height == 3));

    let mut tcp = tokio::net::TcpStream::connect(addr).await.unwrap();
    tcp.write_all(b"GET /slice?volume=none&axis=z&index=1 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    tcp.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 404"), "{resp}");
}
