"""
Process-level plumbing: signal handling, scene discovery, parallel scene
processing and atomic output files.

"""
import contextlib
import datetime
import logging
import os
import shutil
import signal
import tempfile
import time
from multiprocessing import Pool

from natsort import natsorted

from .errors import LFRTError

logger = logging.getLogger(__name__)

BANNER = '----------' * 8

##############################################################################
# signals
##############################################################################

def set_signals():
    """
    Set signals so that multiprocessing processes are correctly killed.
    """
    signal.signal(signal.SIGINT, signal.SIG_IGN)


class SignalHandler(object):
    """Record SIGINT / SIGTERM so long loops can stop at a safe point.

    The previous handlers are restored by ``restore()``.
    """
    terminate = False

    def __init__(self):
        self._previous = {}
        for signum in (signal.SIGINT, signal.SIGTERM):
            try:
                self._previous[signum] = signal.signal(signum, self.exit_gracefully)
            except ValueError:
                # not in the main thread
                pass

    def exit_gracefully(self, signum, frame):
        logger.warning('Signal %d caught; will stop at the next safe point.', signum)
        self.terminate = True

    def restore(self):
        for signum, handler in self._previous.items():
            signal.signal(signum, handler)
        self._previous = {}


def banner(title):
    """Log a section header in the style used by long-running loops."""
    logger.info(BANNER)
    logger.info(title)
    logger.info(datetime.datetime.now().isoformat())
    logger.info(BANNER)

##############################################################################
# paths and atomic output
##############################################################################

def make_path(filename):
    """Create the parent directory of ``filename`` if it does not exist."""
    path = os.path.split(filename)[0]
    if path:
        os.makedirs(path, exist_ok=True)


@contextlib.contextmanager
def atomic_output(filename):
    """Yield a temporary filename that is renamed onto ``filename`` on success.

    The temporary file lives in the destination directory, so the final
    ``os.replace`` is atomic. On any exception the temporary file is removed
    and ``filename`` is left untouched.

    Parameters
    ----------
    filename : str
        Final destination.

    """
    make_path(os.path.abspath(filename))
    directory = os.path.dirname(os.path.abspath(filename))
    fd, tmp = tempfile.mkstemp(prefix='.%s.' % os.path.basename(filename), suffix='.tmp', dir=directory)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, filename)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@contextlib.contextmanager
def atomic_directory(path):
    """Yield a temporary directory that replaces ``path`` on success."""
    path = os.path.abspath(path)
    parent = os.path.dirname(path)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix='.%s.' % os.path.basename(path), dir=parent)
    try:
        yield tmp
        if os.path.isdir(path):
            shutil.rmtree(path)
        os.replace(tmp, path)
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp)


def write_text(filename, text):
    with atomic_output(filename) as tmp:
        with open(tmp, 'w') as outfile:
            outfile.write(text)

##############################################################################
# scenes
##############################################################################

def is_scene(path):
    return os.path.isfile(os.path.join(path, 'meta.json'))


def list_scenes(path):
    """List light-field directories below ``path``.

    Parameters
    ----------
    path : str
        Either a single light-field directory (containing ``meta.json``) or a
        directory of them.

    Returns
    -------
    scenes : list of str
        Scene directories in natural sort order.

    """
    if not os.path.isdir(path):
        raise LFRTError("Cannot find scene path '%s'" % path)
    if is_scene(path):
        return [path]
    scenes = [os.path.join(path, name) for name in os.listdir(path)]
    scenes = natsorted(scene for scene in scenes if os.path.isdir(scene) and is_scene(scene))
    if len(scenes) == 0:
        raise LFRTError("No light-field directories (with meta.json) found in '%s'" % path)
    return scenes


def map_scenes(function, work, nprocesses=1, poll_interval=0.1):
    """Apply ``function`` to every work packet, optionally over a process pool.

    Results are returned in work order. Workers ignore SIGINT; an interrupt
    in the parent closes the pool and re-raises.

    Parameters
    ----------
    function : callable
        Picklable module-level function taking one work packet.
    work : list
        Work packets.
    nprocesses : int, optional, default=1
        Number of worker processes; 1 runs serially in this process.

    """
    work = list(work)
    if nprocesses <= 1 or len(work) <= 1:
        logger.info('Processing %d packets serially', len(work))
        return [function(packet) for packet in work]

    logger.info('Creating pool of %d processes for %d packets...', nprocesses, len(work))
    pool = Pool(nprocesses, set_signals)
    try:
        job = pool.map_async(function, work, chunksize=1)
        while not job.ready():
            time.sleep(poll_interval)
        return job.get()
    except KeyboardInterrupt:
        logger.warning('Caught KeyboardInterrupt, terminating workers.')
        pool.terminate()
        raise
    finally:
        pool.close()
        pool.join()
