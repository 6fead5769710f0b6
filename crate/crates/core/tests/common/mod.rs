#![allow(dead_code)]

use std::net::TcpListener;
use std::thread;

use gtopk::transport::{create_local_cluster, LocalEndpoint};

/// Runs `f` on every rank of a fresh in-process cluster; results in rank order.
pub fn run<R: Send>(p: usize, f: impl Fn(&mut LocalEndpoint) -> R + Sync) -> Vec<R> {
    let eps = create_local_cluster(p).unwrap();
    thread::scope(|s| {
        let handles: Vec<_> = eps
            .into_iter()
            .map(|mut ep| {
                let f = &f;
                s.spawn(move || f(&mut ep))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Localhost addresses on ports that were free a moment ago.
pub fn free_addrs(n: usize) -> Vec<String> {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners
        .iter()
        .map(|l| l.local_addr().unwrap().to_string())
        .collect()
}
