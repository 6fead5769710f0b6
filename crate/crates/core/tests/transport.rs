mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use gtopk::collectives::{dense_ring_allreduce, gtopk_allreduce, topk_allreduce};
use gtopk::sparse_grad::{top_k_select, DenseVector};
use gtopk::transport::{
    connect_tcp_cluster, create_local_cluster, decode_sparse, encode_sparse, ClusterConfig, Endpoint, RankId,
    TcpEndpoint,
};
use gtopk::{Error, SparseVectorF32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{free_addrs, run};

fn tcp_cluster(p: usize) -> Vec<TcpEndpoint> {
    let mut cfg = ClusterConfig::tcp(free_addrs(p));
    cfg.timeout = Duration::from_secs(10);
    thread::scope(|s| {
        let hs: Vec<_> = (0..p)
            .map(|r| {
                let cfg = cfg.clone();
                s.spawn(move || connect_tcp_cluster(&cfg, RankId(r)).unwrap())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn run_tcp<R: Send>(p: usize, f: impl Fn(&mut TcpEndpoint) -> R + Sync) -> Vec<R> {
    let eps = tcp_cluster(p);
    thread::scope(|s| {
        let hs: Vec<_> = eps
            .into_iter()
            .map(|mut ep| {
                let f = &f;
                s.spawn(move || f(&mut ep))
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn random_payload(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let len = if rng.random_bool(0.1) { 0 } else { rng.random_range(0..=max) };
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

#[test]
fn in_process_round_trip_fuzz() {
    let mut eps = create_local_cluster(2).unwrap();
    let (a, b) = eps.split_at_mut(1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..1000 {
        let max = if i % 50 == 0 { 1 << 20 } else { 4096 };
        let payload = random_payload(&mut rng, max);
        a[0].send(RankId(1), 3, &payload).unwrap();
        assert_eq!(b[0].recv(RankId(0), 3).unwrap(), payload);
    }
}

#[test]
fn tcp_round_trip_fuzz() {
    let out = run_tcp(2, |ep| {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let payloads: Vec<Vec<u8>> = (0..1000)
            .map(|i| random_payload(&mut rng, if i % 100 == 0 { 1 << 20 } else { 2048 }))
            .collect();
        if ep.rank().0 == 0 {
            for p in &payloads {
                ep.send(RankId(1), 9, p).unwrap();
            }
            true
        } else {
            payloads.iter().all(|p| ep.recv(RankId(0), 9).unwrap() == *p)
        }
    });
    assert!(out.iter().all(|&ok| ok));
}

#[test]
fn tcp_fifo_and_tags() {
    let out = run_tcp(3, |ep| {
        let r = ep.rank().0;
        let next = RankId((r + 1) % 3);
        let prev = RankId((r + 2) % 3);
        ep.send(next, 7, b"one").unwrap();
        ep.send(next, 8, b"").unwrap();
        ep.send(next, 7, b"two").unwrap();
        let empty = ep.recv(prev, 8).unwrap();
        let first = ep.recv(prev, 7).unwrap();
        let second = ep.recv(prev, 7).unwrap();
        (empty, first, second, ep.stats().bytes_sent)
    });
    for (empty, first, second, sent) in out {
        assert!(empty.is_empty());
        assert_eq!(first, b"one");
        assert_eq!(second, b"two");
        assert_eq!(sent, 6);
    }
}

#[test]
fn backends_agree_bitwise() {
    let p = 5;
    let m = 40;
    let k = 6;
    let grads: Vec<DenseVector<f32>> = (0..p)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + r as u64);
            DenseVector::new((0..m).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        })
        .collect();
    let work = |ep: &mut dyn Endpoint| {
        let g = &grads[ep.rank().0];
        let (sel, _) = top_k_select(g, k).unwrap();
        let dense = dense_ring_allreduce(ep, g).unwrap().to_bits();
        let topk = topk_allreduce(ep, &sel).unwrap().to_bits();
        let gt = gtopk_allreduce(ep, &sel, k).unwrap().global_topk;
        (dense, topk, gt.indices().to_vec(), gt.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    let local = run(p, |ep| work(ep));
    let tcp = run_tcp(p, |ep| work(ep));
    assert_eq!(local, tcp);
}

#[test]
fn unreachable_peer_times_out() {
    let addrs = free_addrs(2);
    let mut cfg = ClusterConfig::tcp(addrs);
    cfg.timeout = Duration::from_millis(300);
    let start = Instant::now();
    match connect_tcp_cluster(&cfg, RankId(1)) {
        Err(Error::Timeout { rank, .. }) => assert_eq!(rank, 0),
        Err(e) => panic!("expected timeout, got {e}"),
        Ok(_) => panic!("expected timeout, got a connection"),
    }
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn missing_higher_rank_times_out() {
    let mut cfg = ClusterConfig::tcp(free_addrs(3));
    cfg.timeout = Duration::from_millis(200);
    match connect_tcp_cluster(&cfg, RankId(0)) {
        Err(Error::Timeout { rank, .. }) => assert_eq!(rank, 1),
        other => panic!("expected timeout, got {:?}", other.err()),
    }
}

#[test]
fn duplicate_rank_announcement_is_rejected() {
    let addrs = free_addrs(3);
    let mut cfg = ClusterConfig::tcp(addrs.clone());
    cfg.timeout = Duration::from_secs(5);
    let server = thread::spawn(move || connect_tcp_cluster(&cfg, RankId(0)));
    let dial = |addr: &str| loop {
        if let Ok(s) = TcpStream::connect(addr) {
            return s;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let mut first = dial(&addrs[0]);
    first.write_all(&1u32.to_le_bytes()).unwrap();
    let mut reply = [0u8; 4];
    first.read_exact(&mut reply).unwrap();
    assert_eq!(u32::from_le_bytes(reply), 0);
    let mut second = dial(&addrs[0]);
    second.write_all(&1u32.to_le_bytes()).unwrap();
    match server.join().unwrap() {
        Err(Error::Protocol(msg)) => assert!(msg.contains("duplicate"), "{msg}"),
        other => panic!("expected protocol error, got {:?}", other.err()),
    }
}

#[test]
fn hosts_file_parsing() {
    let cfg = ClusterConfig::from_hosts("# cluster\n1 10.0.0.2 5001\n0 10.0.0.1 5000\n\n").unwrap();
    assert_eq!(cfg.world_size, 2);
    assert_eq!(cfg.peers, vec!["10.0.0.1:5000", "10.0.0.2:5001"]);
    assert!(ClusterConfig::from_hosts("0 a 1\n2 b 2\n").is_err());
    assert!(ClusterConfig::from_hosts("0 a notaport\n").is_err());
    assert!(ClusterConfig::from_hosts("").is_err());
}

#[test]
fn barrier_waits_for_last_arrival() {
    let delay = Duration::from_millis(150);
    let start = Instant::now();
    let exits = run(4, |ep| {
        if ep.rank().0 == 3 {
            thread::sleep(delay);
        }
        ep.barrier().unwrap();
        start.elapsed()
    });
    assert!(exits.iter().all(|&t| t >= delay), "{exits:?}");
}

#[test]
fn barrier_message_rounds() {
    let sent = run(8, |ep| {
        ep.barrier().unwrap();
        ep.stats().messages_sent
    });
    assert!(sent.iter().all(|&n| n <= 6), "{sent:?}");
    assert_eq!(sent, vec![3; 8]);
    assert_eq!(run(1, |ep| ep.barrier().map(|_| ep.stats().messages_sent).unwrap()), vec![0]);
}

#[test]
fn tcp_barrier() {
    let ok = run_tcp(4, |ep| ep.barrier().is_ok());
    assert!(ok.into_iter().all(|b| b));
}

#[test]
fn dropped_tcp_peer_surfaces_error() {
    let mut eps = tcp_cluster(2);
    let last = eps.pop().unwrap();
    drop(last);
    let ep = &mut eps[0];
    assert!(ep.recv(RankId(1), 1).is_err());
}

#[test]
fn codec_layout_examples() {
    let empty = SparseVectorF32::empty(4);
    assert_eq!(encode_sparse(&empty).len(), 12);
    let one = SparseVectorF32::new(4, vec![1], vec![2.0]).unwrap();
    let bytes = encode_sparse(&one);
    assert_eq!(bytes.len(), 24);
    assert_eq!(&bytes[..4], &0x6754_4B31u32.to_le_bytes());
    assert_eq!(decode_sparse::<f32>(&bytes, 4).unwrap(), one);
    assert!(matches!(decode_sparse::<f32>(&bytes, 1), Err(Error::Protocol(_))));
}
