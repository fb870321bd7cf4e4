//! Per-PE executor for suspended entry code.
//!
//! Tasks are `!Send` futures confined to their PE. Waking a task puts its
//! id on a thread-safe ready list together with one unit of activity, so a
//! runnable task always keeps the program from looking quiescent.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use crate::transport::activity::{Activity, ActivityToken};
use crate::transport::WorkerWaker;

type Task = Pin<Box<dyn Future<Output = ()>>>;

struct ReadyList {
    queue: Mutex<VecDeque<(u64, ActivityToken)>>,
    activity: Activity,
    waker: Mutex<Option<WorkerWaker>>,
}

impl ReadyList {
    fn push(&self, id: u64) {
        let token = self.activity.token();
        self.queue.lock().unwrap().push_back((id, token));
        if let Some(w) = &*self.waker.lock().unwrap() {
            w.wake();
        }
    }
}

struct TaskWaker {
    id: u64,
    list: Arc<ReadyList>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.list.push(self.id);
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.list.push(self.id);
    }
}

pub(crate) struct Executor {
    tasks: RefCell<HashMap<u64, Task>>,
    next: Cell<u64>,
    ready: Arc<ReadyList>,
}

impl Executor {
    pub(crate) fn new(activity: Activity) -> Self {
        Executor {
            tasks: RefCell::default(),
            next: Cell::new(0),
            ready: Arc::new(ReadyList {
                queue: Mutex::default(),
                activity,
                waker: Mutex::default(),
            }),
        }
    }

    pub(crate) fn set_waker(&self, w: WorkerWaker) {
        *self.ready.waker.lock().unwrap() = Some(w);
    }

    pub(crate) fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        let id = self.next.get();
        self.next.set(id + 1);
        self.tasks.borrow_mut().insert(id, Box::pin(fut));
        self.ready.push(id);
    }

    /// Polls every task that was ready on entry. Returns the number polled.
    pub(crate) fn run_ready(&self) -> usize {
        let batch = std::mem::take(&mut *self.ready.queue.lock().unwrap());
        let mut polled = 0;
        for (id, _token) in batch {
            // Taken out of the map so the task may spawn others while polled.
            let Some(mut task) = self.tasks.borrow_mut().remove(&id) else {
                continue;
            };
            polled += 1;
            let waker = Waker::from(Arc::new(TaskWaker {
                id,
                list: self.ready.clone(),
            }));
            let mut cx = Context::from_waker(&waker);
            if task.as_mut().poll(&mut cx) == Poll::Pending {
                self.tasks.borrow_mut().insert(id, task);
            }
        }
        polled
    }

    #[cfg(test)]
    pub(crate) fn has_ready(&self) -> bool {
        !self.ready.queue.lock().unwrap().is_empty()
    }

    #[cfg(test)]
    pub(crate) fn live(&self) -> usize {
        self.tasks.borrow().len()
    }

    /// Drops every task; returns how many were still suspended.
    pub(crate) fn clear(&self) -> usize {
        let tasks = std::mem::take(&mut *self.tasks.borrow_mut());
        let n = tasks.len();
        drop(tasks);
        self.ready.queue.lock().unwrap().clear();
        n
    }
}
