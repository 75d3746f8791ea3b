import csv
from io import BytesIO, StringIO

from app.api.schemas import DiagnosticsRecord, ExperimentSummary


def _number(x: float) -> str:
    return format(x, ".17g")


def series_header(n_fields: int) -> list[str]:
    n_phases = n_fields + 1
    headers = ["t", "W"] + [f"V{k}" for k in range(1, n_phases + 1)]
    for k in range(1, n_fields + 1):
        headers += [f"min_f{k}", f"max_f{k}"]
    return headers


def generate_series_csv(record: DiagnosticsRecord) -> BytesIO:
    """Time series of a run as CSV: t, W, V1..VN, then min/max of every field, 17 significant digits."""
    buffer = StringIO()
    csv_writer = csv.writer(buffer, lineterminator="\n")

    n_fields = len(record.minima[0]) if record.minima else 0
    csv_writer.writerow(series_header(n_fields))

    for t, energy, vols, lows, highs in zip(
        record.times, record.energies, record.volumes, record.minima, record.maxima
    ):
        row = [_number(t), _number(energy)] + [_number(v) for v in vols]
        for low, high in zip(lows, highs):
            row += [_number(low), _number(high)]
        csv_writer.writerow(row)

    bytes_buffer = BytesIO(buffer.getvalue().encode())
    buffer.close()

    return bytes_buffer


def read_series_csv(text: str) -> tuple[list[str], list[list[float]]]:
    reader = csv.reader(StringIO(text))
    header = next(reader)
    return header, [[float(x) for x in row] for row in reader if row]


def generate_summary_json(summary: ExperimentSummary) -> str:
    return summary.model_dump_json(indent=2)
