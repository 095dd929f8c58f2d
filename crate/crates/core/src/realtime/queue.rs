use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Frame plus its arrival time.
pub type Stamped = ([f64; 12], Instant);

#[derive(Debug, Default)]
struct Inner {
    buf: VecDeque<Stamped>,
    drops: u64,
    closed: bool,
}

/// Bounded single-producer/single-consumer frame queue. A full queue drops
/// its oldest frame so the producer never waits; drops are counted.
#[derive(Debug)]
pub struct SampleQueue {
    inner: Mutex<Inner>,
    ready: Condvar,
    capacity: usize,
}

impl SampleQueue {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Mutex::new(Inner::default()), ready: Condvar::new(), capacity: capacity.max(1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&self, frame: [f64; 12], arrival: Instant) {
        let mut g = self.inner.lock().expect("queue lock");
        if g.buf.len() == self.capacity {
            g.buf.pop_front();
            g.drops += 1;
        }
        g.buf.push_back((frame, arrival));
        drop(g);
        self.ready.notify_one();
    }

    /// Takes everything queued, waiting up to `timeout` for the first frame.
    /// Returns `None` once closed and empty.
    pub fn pop_all(&self, timeout: Duration) -> Option<Vec<Stamped>> {
        let g = self.inner.lock().expect("queue lock");
        let (mut g, _) = self
            .ready
            .wait_timeout_while(g, timeout, |i| i.buf.is_empty() && !i.closed)
            .expect("queue lock");
        if g.buf.is_empty() && g.closed {
            return None;
        }
        Some(g.buf.drain(..).collect())
    }

    pub fn close(&self) {
        self.inner.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }

    pub fn drops(&self) -> u64 {
        self.inner.lock().expect("queue lock").drops
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrun_drops_oldest_and_counts() {
        let q = SampleQueue::new(3);
        let now = Instant::now();
        for i in 0..5 {
            q.push([i as f64; 12], now);
        }
        assert_eq!(q.drops(), 2);
        let got: Vec<f64> = q.pop_all(Duration::ZERO).unwrap().iter().map(|f| f.0[0]).collect();
        assert_eq!(got, vec![2.0, 3.0, 4.0]);
        q.close();
        assert!(q.pop_all(Duration::from_millis(1)).is_none());
    }

    #[test]
    fn producer_thread_delivers_in_order() {
        let q = std::sync::Arc::new(SampleQueue::new(10_000));
        let p = q.clone();
        let t = std::thread::spawn(move || {
            for i in 0..1000 {
                p.push([i as f64; 12], Instant::now());
            }
            p.close();
        });
        let mut seen = vec![];
        while let Some(batch) = q.pop_all(Duration::from_millis(50)) {
            seen.extend(batch.iter().map(|f| f.0[0] as usize));
        }
        t.join().unwrap();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
        assert_eq!(q.drops(), 0);
    }
}
