mod common;

use std::cell::RefCell;
use std::rc::Rc;

use charmlet::tag::FULL_MASK;
use common::{pair, settle, tag, Backend};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

const THRESHOLD: usize = 8192;

#[test]
fn payload_hashes_survive_both_protocols() {
    payload_hashes();
}

pub fn payload_hashes() {
    let sizes = [THRESHOLD - 1, THRESHOLD, THRESHOLD + 1, 4 << 20];
    for backend in [Backend::Loopback, Backend::Tcp] {
        let mut w = pair(backend, THRESHOLD);
        let mut rng = StdRng::seed_from_u64(7);
        for (i, &n) in sizes.iter().enumerate() {
            let mut data = vec![0u8; n];
            rng.fill_bytes(&mut data);
            let want = Sha256::digest(&data);
            let got: Rc<RefCell<Option<Vec<u8>>>> = Rc::default();
            let g = got.clone();
            w[1].tag_recv(tag(i as u64), FULL_MASK, n, Box::new(move |ev| {
                assert!(ev.status.is_ok());
                *g.borrow_mut() = Some(ev.data);
            }));
            w[0].tag_send(1, tag(i as u64), data, None).unwrap();
            settle(&mut w);
            let got = got.borrow_mut().take().expect("payload delivered");
            assert_eq!(Sha256::digest(&got), want, "size {n}");
        }
        let s = w[0].stats();
        assert_eq!(s.eager_sends, 2);
        assert_eq!(s.rendezvous_sends, 2);
    }
}
