//! Tag-matching engine: posted receives and unexpected messages.
//!
//! A receive matches a message when `(msg.tag & recv.mask) == (recv.tag &
//! recv.mask)`. A newly posted receive takes the earliest-arrived matching
//! unexpected message; a newly arrived message goes to the earliest-posted
//! matching receive. Both queues stay in order, which gives FIFO matching
//! among equal masked tags.

use std::collections::VecDeque;

use crate::tag::Tag;
use crate::time::Nanos;

use super::PeId;

#[derive(Debug)]
pub struct PostedRecv<R> {
    pub seq: u64,
    pub tag: Tag,
    pub mask: u64,
    pub capacity: usize,
    pub post_ts: Nanos,
    pub target: R,
}

#[derive(Debug)]
pub struct Unexpected<M> {
    pub seq: u64,
    pub from: PeId,
    pub tag: Tag,
    pub len: usize,
    pub arrival: Nanos,
    pub msg: M,
}

#[derive(Debug)]
pub struct MatchingEngine<R, M> {
    posted: VecDeque<PostedRecv<R>>,
    unexpected: VecDeque<Unexpected<M>>,
    next_post: u64,
    next_arrival: u64,
}

impl<R, M> Default for MatchingEngine<R, M> {
    fn default() -> Self {
        MatchingEngine {
            posted: VecDeque::new(),
            unexpected: VecDeque::new(),
            next_post: 0,
            next_arrival: 0,
        }
    }
}

pub type Matched<R, M> = (PostedRecv<R>, Unexpected<M>);

impl<R, M> MatchingEngine<R, M> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Posts a receive; returns the pair if an unexpected message matched.
    pub fn post(
        &mut self,
        tag: Tag,
        mask: u64,
        capacity: usize,
        post_ts: Nanos,
        target: R,
    ) -> Result<Matched<R, M>, u64> {
        let seq = self.next_post;
        self.next_post += 1;
        let recv = PostedRecv {
            seq,
            tag,
            mask,
            capacity,
            post_ts,
            target,
        };
        match self.unexpected.iter().position(|u| u.tag.matches(tag, mask)) {
            Some(i) => {
                let msg = self.unexpected.remove(i).unwrap();
                Ok((recv, msg))
            }
            None => {
                self.posted.push_back(recv);
                Err(seq)
            }
        }
    }

    /// Delivers an arrived message; returns the pair if a posted receive
    /// matched, otherwise queues it as unexpected.
    pub fn arrive(
        &mut self,
        from: PeId,
        tag: Tag,
        len: usize,
        arrival: Nanos,
        msg: M,
    ) -> Option<Matched<R, M>> {
        let seq = self.next_arrival;
        self.next_arrival += 1;
        let u = Unexpected {
            seq,
            from,
            tag,
            len,
            arrival,
            msg,
        };
        match self.posted.iter().position(|r| tag.matches(r.tag, r.mask)) {
            Some(i) => Some((self.posted.remove(i).unwrap(), u)),
            None => {
                self.unexpected.push_back(u);
                None
            }
        }
    }

    /// Earliest unexpected message matching `(tag, mask)`, without consuming it.
    pub fn probe(&self, tag: Tag, mask: u64) -> Option<&Unexpected<M>> {
        self.unexpected.iter().find(|u| u.tag.matches(tag, mask))
    }

    pub fn posted_len(&self) -> usize {
        self.posted.len()
    }

    pub fn unexpected_len(&self) -> usize {
        self.unexpected.len()
    }

    pub fn posted(&self) -> impl Iterator<Item = &PostedRecv<R>> {
        self.posted.iter()
    }

    pub fn unexpected(&self) -> impl Iterator<Item = &Unexpected<M>> {
        self.unexpected.iter()
    }

    /// True if some queued message matches some posted receive. Always
    /// false between calls; exposed for assertions.
    pub fn has_matching_pair(&self) -> bool {
        self.posted
            .iter()
            .any(|r| self.unexpected.iter().any(|u| u.tag.matches(r.tag, r.mask)))
    }

    /// Removes every posted receive for which `pred` holds.
    pub fn drain_posted_where(&mut self, mut pred: impl FnMut(&PostedRecv<R>) -> bool) -> Vec<PostedRecv<R>> {
        let mut out = Vec::new();
        let mut keep = VecDeque::with_capacity(self.posted.len());
        for r in self.posted.drain(..) {
            if pred(&r) {
                out.push(r);
            } else {
                keep.push_back(r);
            }
        }
        self.posted = keep;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unexpected_then_post_matches_immediately() {
        let mut e: MatchingEngine<&str, u32> = MatchingEngine::new();
        let t = Tag(0x2000000030000005);
        assert!(e.arrive(1, t, 4, 0, 10).is_none());
        let (r, u) = e.post(t, u64::MAX, 8, 0, "r").unwrap();
        assert_eq!(r.target, "r");
        assert_eq!(u.msg, 10);
        assert_eq!(e.unexpected_len(), 0);
    }

    #[test]
    fn posted_then_arrival_matches() {
        let mut e: MatchingEngine<&str, u32> = MatchingEngine::new();
        assert!(e.post(Tag(5), u64::MAX, 8, 0, "r").is_err());
        let (r, u) = e.arrive(0, Tag(5), 1, 0, 1).unwrap();
        assert_eq!((r.target, u.msg), ("r", 1));
    }

    #[test]
    fn fifo_among_equal_tags() {
        let (a, b) = (Tag(0x10), Tag(0x11));
        let mut e: MatchingEngine<u32, u32> = MatchingEngine::new();
        e.arrive(0, a, 0, 0, 1);
        e.arrive(0, b, 0, 0, 2);
        e.arrive(0, a, 0, 0, 3);
        assert_eq!(e.post(a, u64::MAX, 0, 0, 0).unwrap().1.msg, 1);
        assert_eq!(e.post(a, u64::MAX, 0, 0, 0).unwrap().1.msg, 3);
        assert_eq!(e.unexpected_len(), 1);
    }

    #[test]
    fn mask_wildcards() {
        let mut e: MatchingEngine<u32, u32> = MatchingEngine::new();
        e.arrive(0, Tag(0x2000_0000_0000_0001), 0, 0, 1);
        assert!(e.probe(Tag(0x3000_0000_0000_0000), crate::tag::KIND_MASK).is_none());
        let p = e.probe(Tag(0x2000_0000_0000_0000), crate::tag::KIND_MASK).unwrap();
        assert_eq!(p.msg, 1);
        assert!(!e.has_matching_pair());
    }
}
