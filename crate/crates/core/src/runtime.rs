//! Runs a [`Kernel`] on its own thread behind a command queue. Commands are
//! applied one at a time in arrival order; callers block on the reply.

use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use crate::error::{KernelError, Result};
use crate::kernel::{Command, Kernel, Reply};

enum Request {
    Execute(Command, mpsc::Sender<Result<Reply>>),
    Inspect(Box<dyn FnOnce(&Kernel) + Send>),
}

/// Cloneable handle to a kernel thread.
#[derive(Clone)]
pub struct KernelHandle {
    tx: mpsc::Sender<Request>,
}

/// Owns the kernel thread; dropping every handle and calling
/// [`KernelThread::join`] returns the kernel.
pub struct KernelThread {
    handle: KernelHandle,
    join: JoinHandle<Kernel>,
}

fn stopped() -> KernelError {
    KernelError::Rejected("kernel thread has stopped".into())
}

impl KernelThread {
    pub fn spawn(mut kernel: Kernel) -> Self {
        let (tx, rx) = mpsc::channel::<Request>();
        let join = thread::spawn(move || {
            for request in rx {
                match request {
                    Request::Execute(cmd, reply) => {
                        // A caller that stopped waiting is not an error.
                        let _ = reply.send(kernel.execute(cmd));
                    }
                    Request::Inspect(f) => f(&kernel),
                }
            }
            kernel
        });
        KernelThread {
            handle: KernelHandle { tx },
            join,
        }
    }

    pub fn handle(&self) -> KernelHandle {
        self.handle.clone()
    }

    /// Stops accepting commands once all other handles are gone and returns
    /// the kernel.
    pub fn join(self) -> Kernel {
        drop(self.handle);
        self.join.join().expect("kernel thread panicked")
    }
}

impl KernelHandle {
    pub fn execute(&self, command: Command) -> Result<Reply> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Request::Execute(command, tx)).map_err(|_| stopped())?;
        rx.recv().map_err(|_| stopped())?
    }

    /// Reads a consistent view of the kernel between two commands.
    pub fn inspect<T: Send + 'static>(&self, f: impl FnOnce(&Kernel) -> T + Send + 'static) -> Result<T> {
        let (tx, rx) = mpsc::channel();
        let request = Request::Inspect(Box::new(move |k| {
            let _ = tx.send(f(k));
        }));
        self.tx.send(request).map_err(|_| stopped())?;
        rx.recv().map_err(|_| stopped())
    }
}
