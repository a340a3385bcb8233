'''Helper functions shared across nvmux, including:
    - Colors / log: console output, human and key=value flavors.
    - progress_bar: progress bar mimic xlua.progress.
    - rng_stream: order-independent seeded random streams.
    - generate_kwargs: route config values to classes declaring accepts_<key>.
'''
import os
import sys
import time
import json
import zlib
import shutil
import numpy as np

from pathlib import Path
from networkx.readwrite.json_graph import node_link_data, node_link_graph


def fwd():
    """Get file's working directory"""
    return Path(__file__).parent.absolute()


def recipe_path(name):
    return os.path.join(fwd(), f'recipes/{name}.json')


def makeparentdirs(path):
    dir = Path(path).parent
    os.makedirs(dir, exist_ok=True)


def generate_kwargs(config, object, keys=(), kwargs=None):
    """Collect the keyword arguments `object` accepts from `config`.

    A class opts into a key by defining `accepts_<key> = True`.
    """
    kwargs = kwargs or {}

    for key in keys:
        accepts_key = getattr(object, f'accepts_{key}', False)
        if not accepts_key:
            continue

        value = getattr(config, key, None)
        if value is not None:
            kwargs[key] = value
            Colors.cyan(f'{key}:\t{summarize(value)}')
    return kwargs


def summarize(value, limit=60):
    text = repr(value)
    return text if len(text) <= limit else text[:limit - 3] + '...'


class Colors:
    RED = '\x1b[31m'
    GREEN = '\x1b[32m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'
    CYAN = '\x1b[36m'

    @classmethod
    def red(cls, *args):
        print(cls.RED + args[0], *args[1:], cls.ENDC)

    @classmethod
    def green(cls, *args):
        print(cls.GREEN + args[0], *args[1:], cls.ENDC)

    @classmethod
    def cyan(cls, *args):
        print(cls.CYAN + args[0], *args[1:], cls.ENDC)

    @classmethod
    def bold(cls, *args):
        print(cls.BOLD + args[0], *args[1:], cls.ENDC)


#######
# LOG #
#######


VERBOSITY = 0


def set_verbosity(level):
    global VERBOSITY
    VERBOSITY = int(level)


def format_value(value):
    """Render one log field.

    >>> format_value(0.000123456789)
    '0.000123457'
    >>> format_value('two words')
    '"two words"'
    >>> format_value(True)
    'true'
    """
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return '%.6g' % value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    text = str(value)
    if not text or any(c.isspace() for c in text) or '=' in text:
        return json.dumps(text)
    return text


def format_log(event, **fields):
    """
    >>> format_log('sweep.point', kind='scc_opt', t_ns=250.0, sigma_r=12.08)
    'sweep.point kind=scc_opt t_ns=250 sigma_r=12.08'
    """
    return ' '.join([event] + [f'{k}={format_value(v)}' for k, v in fields.items()])


def log(event, **fields):
    print(format_log(event, **fields))
    sys.stdout.flush()


############
# PROGRESS #
############


TOTAL_BAR_LENGTH = 40.
last_time = time.time()
begin_time = last_time


def progress_bar(current, total, msg=None):
    global last_time, begin_time
    if VERBOSITY < 1:
        return
    if current == 0:
        begin_time = time.time()  # Reset for new bar.

    term_width = shutil.get_terminal_size((80, 20)).columns
    cur_len = int(TOTAL_BAR_LENGTH * current / total)
    rest_len = int(TOTAL_BAR_LENGTH - cur_len) - 1

    bar = ' [' + '=' * cur_len + '>' + '.' * rest_len + ']'

    cur_time = time.time()
    step_time = cur_time - last_time
    last_time = cur_time
    tot_time = cur_time - begin_time

    L = ['  Step: %s' % format_time(step_time), ' | Tot: %s' % format_time(tot_time)]
    if msg:
        L.append(' | ' + msg)
    line = bar + ''.join(L) + ' %d/%d ' % (current + 1, total)

    sys.stdout.write(line[:max(term_width - 1, 10)])
    sys.stdout.write('\r' if current < total - 1 else '\n')
    sys.stdout.flush()


def format_time(seconds):
    """
    >>> format_time(3725.5)
    '1h2m'
    >>> format_time(0.25)
    '250ms'
    """
    days = int(seconds / 3600 / 24)
    seconds = seconds - days * 3600 * 24
    hours = int(seconds / 3600)
    seconds = seconds - hours * 3600
    minutes = int(seconds / 60)
    seconds = seconds - minutes * 60
    secondsf = int(seconds)
    seconds = seconds - secondsf
    millis = int(round(seconds * 1000))

    f = ''
    i = 1
    for value, unit in ((days, 'D'), (hours, 'h'), (minutes, 'm'),
                        (secondsf, 's'), (millis, 'ms')):
        if value > 0 and i <= 2:
            f += str(value) + unit
            i += 1
    if f == '':
        f = '0ms'
    return f


#######
# RNG #
#######


def encode_key(key):
    """Map a stream key to a non-negative integer. Strings use CRC32.

    >>> encode_key('gain')
    3499437312
    >>> encode_key(7)
    7
    """
    if isinstance(key, str):
        return zlib.crc32(key.encode('utf-8'))
    key = int(key)
    assert key >= 0, f'Stream keys must be non-negative, got {key}'
    return key


def rng_stream(seed, *keys):
    """Counter-based generator for the stream named by (seed, *keys).

    Two calls with the same arguments give identical draws; distinct keys
    give statistically independent streams.
    """
    entropy = [encode_key(seed)] + [encode_key(key) for key in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


#########
# GRAPH #
#########


def write_graph(G, path):
    makeparentdirs(path)
    with open(str(path), 'w') as f:
        json.dump(node_link_data(G), f, indent=2)


def read_graph(path):
    with open(str(path)) as f:
        return node_link_graph(json.load(f))


def generate_fname(experiment, prefix='', seed=None, **kwargs):
    """Stem for output files of a run.

    >>> generate_fname('charge', seed=3)
    'nvmux-charge-seed3'
    >>> generate_fname('t1', prefix='t1-widefield')
    't1-widefield-t1'
    """
    fname = prefix or 'nvmux'
    fname += '-' + experiment
    if seed is not None:
        fname += f'-seed{seed}'
    return fname
