"""
Worker Pool - Shared generation workers over read-only model snapshots
Input: (index, task) through a bounded queue
Output: results reassembled in index order, so scheduling never changes output
Also hosts the background batch reader used by recovery.
"""
import logging
import queue
import threading
import traceback

logger = logging.getLogger(__name__)


class TaskFailure:
    """Placeholder for a task that raised; carries the error text"""

    def __init__(self, index, error):
        self.index = index
        self.error = error

    def __repr__(self):
        return f"TaskFailure(index={self.index}, error={self.error!r})"


class GenerationPool:
    """
    Fixed set of worker threads running fn(task) for every submitted task.
    A failing task yields a TaskFailure in its slot; the pool keeps going.
    """

    def __init__(self, fn, num_workers=1, queue_size=64, name="generation"):
        self.fn = fn
        self.num_workers = max(1, int(num_workers))
        self.name = name
        self.input_queue = queue.Queue(maxsize=queue_size)
        self.results = {}
        self.lock = threading.Lock()
        self.failures = 0
        self._progress = None

        logger.info(f"{name}: GenerationPool initialized with {self.num_workers} worker(s)")

    def _worker(self):
        while True:
            item = self.input_queue.get()
            if item is None:
                self.input_queue.task_done()
                break
            index, task = item
            try:
                result = self.fn(task)
            except Exception as e:
                logger.error(f"{self.name}: task {index} failed: {e}")
                logger.debug(traceback.format_exc())
                result = TaskFailure(index, str(e))
                with self.lock:
                    self.failures += 1
            with self.lock:
                self.results[index] = result
                if self._progress is not None:
                    self._progress.update(1)
            self.input_queue.task_done()

    def map(self, tasks, progress=None):
        """Run every task; returns results in submission order"""
        tasks = list(tasks)
        self.results = {}
        self.failures = 0
        self._progress = progress

        if self.num_workers == 1:
            for index, task in enumerate(tasks):
                self.input_queue.put((index, task))
                self.input_queue.put(None)
                self._worker()
        else:
            workers = [threading.Thread(target=self._worker, name=f"{self.name}-{i}", daemon=True)
                       for i in range(self.num_workers)]
            for w in workers:
                w.start()
            for index, task in enumerate(tasks):
                self.input_queue.put((index, task))
            for _ in workers:
                self.input_queue.put(None)
            for w in workers:
                w.join()

        if self.failures:
            logger.warning(f"{self.name}: {self.failures}/{len(tasks)} task(s) failed")
        return [self.results[i] for i in range(len(tasks))]


class BatchPrefetcher:
    """
    Background reader filling a bounded buffer with batches.
    Iteration yields batches in the order the source produces them.
    close() (or leaving the with-block) stops the reader even when the
    consumer quit early.
    """
    _END = object()

    def __init__(self, source, maxsize=4, name="prefetch", poll=0.1):
        self.source = source
        self.name = name
        self.poll = poll
        self.queue = queue.Queue(maxsize=maxsize)
        self.error = None
        self.stop_event = threading.Event()
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _put(self, item):
        while not self.stop_event.is_set():
            try:
                self.queue.put(item, timeout=self.poll)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            for batch in self.source:
                if not self._put(batch):
                    logger.info(f"{self.name}: reader stopped early")
                    return
        except Exception as e:
            logger.error(f"{self.name}: reader failed: {e}")
            self.error = e
        finally:
            self._put(self._END)

    def __iter__(self):
        self.thread.start()
        try:
            while True:
                batch = self.queue.get()
                if batch is self._END:
                    break
                yield batch
        finally:
            self.close()
        if self.error is not None:
            raise self.error

    def close(self):
        self.stop_event.set()
        while True:
            try:
                self.queue.get_nowait()
            except queue.Empty:
                break
        if self.thread.is_alive():
            self.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False
