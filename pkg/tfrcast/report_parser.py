import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Tuple

import requests

logger = logging.getLogger(__name__)

REPORT_HEADER = ("country_code", "year", "tfr", "source_id")
MIN_YEAR, MAX_YEAR = 1900, 2100
MAX_DOWNLOAD_BYTES = 100 * 1024 * 1024


class ReportParseError(ValueError):
    """Raised for malformed report rows; ``lines`` holds the offending line numbers."""

    def __init__(self, problems: List[Tuple[int, str]], source: str = "<lines>"):
        self.lines = [line_no for line_no, _ in problems]
        self.problems = problems
        shown = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{source}: {len(problems)} malformed rows: {shown}{more}")


@dataclass(frozen=True)
class RawReport:
    """One published TFR estimate for a country-year from one data source."""

    country_code: str
    year: int
    tfr: float
    source_id: str

    def to_row(self) -> str:
        return f"{self.country_code},{self.year},{self.tfr!r},{self.source_id}"


def is_url(source: str) -> bool:
    return source.startswith(("http://", "https://"))


def fetch_text(url: str, timeout: int = 60) -> str:
    """Download a delimited-text file and return its decoded content."""
    try:
        response = requests.get(url, timeout=timeout, stream=True)
        response.raise_for_status()

        content_bytes = b""
        for chunk in response.iter_content(chunk_size=1024 * 1024):
            if chunk:
                content_bytes += chunk
                if len(content_bytes) > MAX_DOWNLOAD_BYTES:
                    raise ValueError("Remote file too large (>100MB)")
    except requests.RequestException as e:
        raise ConnectionError(f"Failed to download {url}: {e}")

    try:
        return content_bytes.decode("utf-8")
    except UnicodeDecodeError:
        # Spreadsheet exports often come out as latin-1
        for encoding in ["cp1252", "latin1"]:
            try:
                return content_bytes.decode(encoding)
            except UnicodeDecodeError:
                continue
    raise ValueError(f"Unable to decode content from {url}")


def read_source_lines(source: str) -> List[str]:
    """Lines of a local path or http(s) URL."""
    if is_url(source):
        return fetch_text(source).splitlines()
    if not os.path.exists(source):
        raise FileNotFoundError(f"File not found: {source}")
    with open(source, "r", encoding="utf-8") as f:
        return f.read().splitlines()


class RawReportParser:
    """
    Parses raw multi-source fertility report files
    (``country_code,year,tfr,source_id``).

    Comment lines starting with ``#`` (such as the manifest line written by
    ``tfrcast synth``) and blank lines are skipped.
    """

    def __init__(self, progress_callback: Optional[Callable[[int, int], None]] = None):
        self.progress_callback = progress_callback
        self.progress_update_interval = 10000
        self.duplicates_dropped = 0

    def parse_file(self, source: str) -> List[RawReport]:
        """
        Parses a report file from a path or URL.

        Args:
            source: Local path or http(s) URL.

        Returns:
            Records in input order, exact duplicates removed.

        Raises:
            FileNotFoundError: If a local path does not exist.
            ReportParseError: If the header is wrong or any row is malformed.
        """
        lines = read_source_lines(source)
        return self.parse_lines(lines, source=os.path.basename(source) or source)

    def parse_lines(self, lines: Iterable[str], source: str = "<lines>") -> List[RawReport]:
        """Parses report content given as lines (header included)."""
        reports: List[RawReport] = []
        problems: List[Tuple[int, str]] = []
        seen = set()
        self.duplicates_dropped = 0
        header_seen = False

        lines = list(lines)
        for line_no, raw_line in enumerate(lines, start=1):
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                header = tuple(cell.strip() for cell in line.split(","))
                if header != REPORT_HEADER:
                    raise ReportParseError(
                        [(line_no, f"expected header {','.join(REPORT_HEADER)}")], source
                    )
                header_seen = True
                continue

            report, problem = self._parse_row(line)
            if problem:
                problems.append((line_no, problem))
                continue
            if report in seen:
                self.duplicates_dropped += 1
                logger.warning("%s: duplicate row at line %d dropped", source, line_no)
                continue
            seen.add(report)
            reports.append(report)

            if self.progress_callback and len(reports) % self.progress_update_interval == 0:
                self.progress_callback(int(100 * line_no / len(lines)), len(reports))

        if not header_seen:
            raise ReportParseError([(1, "missing header row")], source)
        if problems:
            raise ReportParseError(problems, source)
        if self.progress_callback:
            self.progress_callback(100, len(reports))
        return reports

    def _parse_row(self, line: str) -> Tuple[Optional[RawReport], Optional[str]]:
        cells = [cell.strip() for cell in line.split(",")]
        if len(cells) != len(REPORT_HEADER):
            return None, f"expected {len(REPORT_HEADER)} fields, got {len(cells)}"
        country_code, year_text, tfr_text, source_id = cells
        if not country_code:
            return None, "empty country_code"
        if not source_id:
            return None, "empty source_id"
        try:
            year = int(year_text)
        except ValueError:
            return None, f"non-integer year {year_text!r}"
        if not MIN_YEAR <= year <= MAX_YEAR:
            return None, f"year {year} outside [{MIN_YEAR}, {MAX_YEAR}]"
        try:
            tfr = float(tfr_text)
        except ValueError:
            return None, f"non-numeric tfr {tfr_text!r}"
        if not math.isfinite(tfr) or tfr <= 0:
            return None, f"tfr must be positive, got {tfr_text}"
        return RawReport(country_code, year, tfr, source_id), None


def parse_raw(source: str) -> List[RawReport]:
    """Parses a raw reports file or URL into records (see RawReportParser)."""
    return RawReportParser().parse_file(source)


def write_reports(
    reports: Iterable[RawReport], path: str, manifest_id: Optional[str] = None
):
    """Writes records in the raw reports schema."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if manifest_id:
            f.write(f"# manifest={manifest_id}\n")
        f.write(",".join(REPORT_HEADER) + "\n")
        for report in reports:
            f.write(report.to_row() + "\n")
