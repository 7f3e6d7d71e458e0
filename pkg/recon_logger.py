# THEORY:
# Dedicated run logger for reconstructions. Training loops, baselines and the
# experiment runner all report through one named logger so a run directory
# ends up with a single readable timeline: stages, per-cadence training
# progress, metric reports and sweep cells, each on one line.

# CAVEATS & WARNINGS:
# - One process-wide instance; attaching a second file handler replaces the first.
# - Console output goes to stderr so CLI summaries on stdout stay clean.

import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from typing import Optional

LINE_FORMAT = '%(asctime)s.%(msecs)03d | %(message)s'
DATE_FORMAT = '%H:%M:%S'


class ReconLogger:
    def __init__(self, name: str = "NafRecon", level: int = logging.INFO):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(level)
        self.logger.propagate = False

        # Remove existing handlers to avoid duplicates
        self.logger.handlers.clear()

        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(logging.Formatter(LINE_FORMAT, datefmt=DATE_FORMAT))
        self.logger.addHandler(console)
        self._file_handler: Optional[logging.Handler] = None

    def set_level(self, level: int):
        self.logger.setLevel(level)

    def attach_file(self, log_file: str):
        """Also write to a daily-rotating file (7 backups), e.g. inside a run directory."""
        self.detach_file()
        handler = TimedRotatingFileHandler(log_file, when='midnight', interval=1, backupCount=7, encoding='utf-8')
        handler.setFormatter(logging.Formatter(LINE_FORMAT, datefmt=DATE_FORMAT))
        self.logger.addHandler(handler)
        self._file_handler = handler
        return handler

    def detach_file(self):
        if self._file_handler is not None:
            self.logger.removeHandler(self._file_handler)
            self._file_handler.close()
            self._file_handler = None

    def log_stage(self, stage: str, detail: str = "", duration_ms: Optional[float] = None):
        line = f"▶ {stage.upper():<12}"
        if detail:
            line += f" | {detail}"
        if duration_ms is not None:
            line += f" | {duration_ms:.0f}ms"
        self.logger.info(line)

    def log_iteration(self, iteration: int, total: int, loss: float, lr: float,
                      psnr: Optional[float] = None, holdout_loss: Optional[float] = None,
                      wall_ms: Optional[float] = None):
        line = f"📉 ITER {iteration:>6}/{total} | loss: {loss:.6e} | lr: {lr:.3e}"
        if psnr is not None:
            line += f" | PSNR: {psnr:6.2f}dB"
        if holdout_loss is not None:
            line += f" | holdout: {holdout_loss:.6e}"
        if wall_ms is not None:
            line += f" | {wall_ms / 1000.0:.1f}s"
        self.logger.info(line)

    def log_metrics(self, label: str, psnr: float, ssim: float):
        self.logger.info(f"📊 METRICS | {label} | PSNR={psnr:.2f}dB SSIM={ssim:.4f}")

    def log_sweep_cell(self, views: int, method: str, status: str,
                       psnr: Optional[float] = None, ssim: Optional[float] = None, wall_ms: float = 0.0):
        mark = "✅" if status == 'ok' else "❌"
        line = f"{mark} SWEEP | views: {views:3d} | method: {method:<13} | {wall_ms:.0f}ms"
        if psnr is not None and ssim is not None:
            line += f" | PSNR={psnr:.2f}dB SSIM={ssim:.4f}"
        self.logger.info(line)

    def log_failure(self, context: str, error: BaseException):
        self.logger.error(f"❌ {context} | {type(error).__name__}: {error}")


# Global logger instance
recon_logger = ReconLogger()
