"""Metric report schema and its text/CSV serialisations."""

import math

from pydantic import BaseModel, ConfigDict, Field

# Fixed key order for text and CSV output
METRIC_KEYS = (
    "psnr_db",
    "ssim",
    "ate_rmse_m",
    "acc_m",
    "comp_m",
    "acc_ratio_3cm",
    "comp_ratio_3cm",
)


class MetricReport(BaseModel):
    """Evaluation summary; metrics that could not be computed stay None."""

    model_config = ConfigDict(extra="forbid")

    psnr_db: float | None = Field(None, description="Mean per-frame PSNR (dB)")
    ssim: float | None = Field(None, ge=-1, le=1)
    ate_rmse_m: float | None = Field(None, ge=0)
    acc_m: float | None = Field(None, ge=0)
    comp_m: float | None = Field(None, ge=0)
    acc_ratio_3cm: float | None = Field(None, ge=0, le=1)
    comp_ratio_3cm: float | None = Field(None, ge=0, le=1)

    @staticmethod
    def _format(value: float | None) -> str:
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return "nan"
        return f"{value:.6f}"

    def to_text(self) -> str:
        """`key: value` lines in the fixed key order."""
        return "".join(
            f"{key}: {self._format(getattr(self, key))}\n" for key in METRIC_KEYS
        )

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(METRIC_KEYS)

    def to_csv_row(self) -> str:
        return ",".join(self._format(getattr(self, key)) for key in METRIC_KEYS)

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        """Parse the output of `to_text`; `nan` entries become None."""
        values: dict[str, float | None] = {}
        for line in text.splitlines():
            key, sep, value = line.partition(":")
            if not sep or key.strip() not in METRIC_KEYS:
                continue
            value = value.strip()
            values[key.strip()] = None if value == "nan" else float(value)
        return cls.model_validate(values)
