"""Reading MovingAI-format maps and scenarios, rendering maps as text or PNG,
and fetching the benchmark files used by the experiments."""

from __future__ import annotations

import hashlib
import io
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Coord, GridMap, Instance, is_free

log = logging.getLogger(__name__)

FREE_CHARS = frozenset(".G")
OBSTACLE_CHARS = frozenset("@OT")


class FormatError(ValueError):
    pass


def file_to_internal(col: int, row: int, height: int) -> Coord:
    return Coord(col, height - 1 - row)


def internal_to_file(c: Coord, height: int) -> tuple[int, int]:
    return c.x, height - 1 - c.y


def parse_map(text: str, name: str = "") -> GridMap:
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "map":
            break
        key, _, value = line.partition(" ")
        if key not in ("type", "height", "width"):
            raise FormatError(f"unexpected header line {line!r}")
        header[key] = value.strip()
    else:
        raise FormatError("missing 'map' line")
    try:
        height = int(header["height"])
        width = int(header["width"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"bad or missing height/width in header: {header}") from e

    rows = [ln.rstrip("\r\n") for ln in lines[i:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != height:
        raise FormatError(f"expected {height} rows, got {len(rows)}")
    obstacles = set()
    for r, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(f"row {r} has length {len(row)}, expected {width}")
        for col, ch in enumerate(row):
            if ch in OBSTACLE_CHARS:
                obstacles.add(file_to_internal(col, r, height))
            elif ch not in FREE_CHARS:
                raise FormatError(f"unknown map character {ch!r} at row {r}, col {col}")
    return GridMap(width, height, frozenset(obstacles), name)


def load_map(path: str | Path) -> GridMap:
    path = Path(path)
    return parse_map(path.read_text(), name=path.stem)


def render_ascii(m: GridMap) -> str:
    """Map rows top (max y) first, '@' for obstacles and '.' for free cells."""
    rows = []
    for y in range(m.height - 1, -1, -1):
        rows.append("".join("@" if Coord(x, y) in m.obstacles else "." for x in range(m.width)))
    return "\n".join(rows)


def render_map_file(m: GridMap) -> str:
    return f"type octile\nheight {m.height}\nwidth {m.width}\nmap\n{render_ascii(m)}\n"


@dataclass(frozen=True)
class ScenEntry:
    bucket: int
    map_name: str
    map_width: int
    map_height: int
    start: Coord
    goal: Coord
    optimal_single_agent_distance: float


def parse_scen(text: str, m: GridMap) -> list[ScenEntry]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("version"):
        raise FormatError("scenario file must start with a 'version' line")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 9:
            raise FormatError(f"line {lineno}: expected 9 tab-separated fields, got {len(fields)}")
        try:
            bucket = int(fields[0])
            w, h = int(fields[2]), int(fields[3])
            sc, sr, gc, gr = (int(f) for f in fields[4:8])
            dist = float(fields[8])
        except ValueError as e:
            raise FormatError(f"line {lineno}: {e}") from e
        if (w, h) != (m.width, m.height):
            raise FormatError(f"line {lineno}: scenario is for a {w}x{h} map, got {m.width}x{m.height}")
        start = file_to_internal(sc, sr, m.height)
        goal = file_to_internal(gc, gr, m.height)
        for label, c in (("start", start), ("goal", goal)):
            if not m.in_bounds(c):
                raise FormatError(f"line {lineno}: {label} {c} out of bounds")
            if not is_free(m, c):
                raise FormatError(f"line {lineno}: {label} {c} is on an obstacle")
        if start == goal and dist != 0:
            raise FormatError(f"line {lineno}: start equals goal but distance is {dist}")
        entries.append(ScenEntry(bucket, fields[1], w, h, start, goal, dist))
    return entries


def load_scen(path: str | Path, m: GridMap) -> list[ScenEntry]:
    return parse_scen(Path(path).read_text(), m)


def make_instance(entries: list[ScenEntry], n: int, m: GridMap) -> Instance:
    """Agents 1..n are the first ``n`` scenario entries, in file order."""
    if n < 1:
        raise ValueError("need at least one agent")
    if n > len(entries):
        raise ValueError(f"requested {n} agents but the scenario has only {len(entries)} entries")
    chosen = entries[:n]
    return Instance(m, tuple(e.start for e in chosen), tuple(e.goal for e in chosen))


# -- images -----------------------------------------------------------------

FREE_COLOR = (255, 255, 255)
OBSTACLE_COLOR = (0, 0, 0)
AGENT_COLOR = (220, 40, 40)
GOAL_COLOR = (40, 160, 60)


@dataclass
class MapImage:
    pixels: np.ndarray  # (rows, cols, 3) uint8, row 0 is the top of the map
    cell_size: int

    def to_png(self) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_png())


def render_image(
    m: GridMap,
    cell_size: int = 8,
    agents: list[Coord] | None = None,
    goals: list[Coord] | None = None,
) -> MapImage:
    """Rasterize the map with the same top-row-first orientation as the ASCII form.

    Goal cells are filled, agents are drawn as a smaller centered square.
    """
    if cell_size < 1:
        raise ValueError("cell_size must be positive")
    grid = np.full((m.height, m.width, 3), FREE_COLOR, dtype=np.uint8)
    for o in m.obstacles:
        grid[m.height - 1 - o.y, o.x] = OBSTACLE_COLOR
    for g in goals or ():
        grid[m.height - 1 - g.y, g.x] = GOAL_COLOR
    pixels = np.repeat(np.repeat(grid, cell_size, axis=0), cell_size, axis=1)
    pad = cell_size // 4
    for a in agents or ():
        r0 = (m.height - 1 - a.y) * cell_size
        c0 = a.x * cell_size
        pixels[r0 + pad : r0 + cell_size - pad, c0 + pad : c0 + cell_size - pad] = AGENT_COLOR
    return MapImage(pixels, cell_size)


# -- fetching ---------------------------------------------------------------

BENCHMARK_MAPS = ("empty-8-8", "room-32-32-4", "maze-32-32-2")

# The gym-mapf wheel on PyPI redistributes the MovingAI maps and "even"
# scenario sets (MIT license).
PYPI_WHEEL_URL = (
    "https://files.pythonhosted.org/packages/ac/ed/"
    "cbe19d844036f0b1f605568c991b060874b93fe93e734de4458bbde97e55/"
    "gym_mapf-0.4.6-py3-none-any.whl"
)
PYPI_WHEEL_SHA256 = "8bf01ffd44a2bd301144547e40846cf1d6b99fcf772a14a36a76b30054a748d4"

MOVINGAI_MAP_ZIP = "https://movingai.com/benchmarks/mapf/mapf-map.zip"
MOVINGAI_SCEN_ZIP = "https://movingai.com/benchmarks/mapf/mapf-scen-{kind}.zip"


class ChecksumError(RuntimeError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _download(url: str, timeout: float = 60.0) -> bytes:
    import httpx

    log.info("downloading %s", url)
    resp = httpx.get(url, timeout=timeout, follow_redirects=True)
    resp.raise_for_status()
    return resp.content


def fetch_benchmarks(
    dest: str | Path,
    source: str = "pypi",
    maps: tuple[str, ...] = BENCHMARK_MAPS,
    scen_kind: str = "even",
    download=_download,
) -> dict[str, str]:
    """Download maps and scenario files into ``dest``.

    ``source="pypi"`` pulls a checksum-pinned wheel (only the "even" scenario
    set is available there). ``source="movingai"`` pulls the archives from
    the benchmark site; those are not pinned, so their hashes are returned
    and written to ``SHA256SUMS`` for later verification.
    Returns ``{relative file name: sha256}`` of everything written.
    """
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}

    def keep(name: str, data: bytes) -> None:
        (dest / name).write_bytes(data)
        written[name] = sha256_hex(data)

    if source == "pypi":
        if scen_kind != "even":
            raise ValueError("the pinned PyPI source only carries the 'even' scenario set")
        blob = download(PYPI_WHEEL_URL)
        digest = sha256_hex(blob)
        if digest != PYPI_WHEEL_SHA256:
            raise ChecksumError(f"wheel sha256 {digest} != pinned {PYPI_WHEEL_SHA256}")
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            for member in zf.namelist():
                parts = member.split("/")
                if len(parts) == 4 and parts[1] == "maps" and parts[2] in maps:
                    fname = parts[3]
                    if fname.endswith(".map") or f"-{scen_kind}-" in fname:
                        keep(fname, zf.read(member))
    elif source == "movingai":
        archives = [download(MOVINGAI_MAP_ZIP), download(MOVINGAI_SCEN_ZIP.format(kind=scen_kind))]
        for blob in archives:
            with zipfile.ZipFile(io.BytesIO(blob)) as zf:
                for member in zf.namelist():
                    fname = member.rsplit("/", 1)[-1]
                    stem = fname.rsplit(".", 1)[0]
                    base = stem.split(f"-{scen_kind}-")[0]
                    if base in maps and (fname.endswith(".map") or fname.endswith(".scen")):
                        keep(fname, zf.read(member))
    else:
        raise ValueError(f"unknown source {source!r}")

    missing = [m for m in maps if f"{m}.map" not in written]
    if missing:
        raise FileNotFoundError(f"archive did not contain maps: {missing}")
    sums = "".join(f"{h}  {name}\n" for name, h in sorted(written.items()))
    (dest / "SHA256SUMS").write_text(sums)
    return written


def scen_path(data_dir: str | Path, map_name: str, index: int, kind: str = "even") -> Path:
    return Path(data_dir) / f"{map_name}-{kind}-{index}.scen"


def load_benchmark_instance(
    data_dir: str | Path, map_name: str, scenario: int, n: int, kind: str = "even"
) -> Instance:
    m = load_map(Path(data_dir) / f"{map_name}.map")
    entries = load_scen(scen_path(data_dir, map_name, scenario, kind), m)
    return make_instance(entries, n, m)
