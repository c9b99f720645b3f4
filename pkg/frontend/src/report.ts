/** View-model for the admin results screen (Fig-2-style histogram rows). */

import { StudyReport } from "./api.js";

export interface HistogramRow {
  rating: number;
  real: number;
  synthetic: number;
}

export interface ReportView {
  markedRealPct: string;
  realAccuracyPct: string;
  syntheticAccuracyPct: string;
  foolingRatePct: string;
  realMean: string;
  syntheticMean: string;
  tLine: string;
  pearsonLine: string;
  histogram: HistogramRow[];
  warnings: string[];
}

const pct = (v: number | null): string =>
  v === null ? "n/a" : `${Math.round(v * 100)}%`;

const num = (v: number | null | undefined, digits = 2): string =>
  v === null || v === undefined ? "n/a" : v.toFixed(digits);

export function reportView(report: StudyReport): ReportView {
  const levels = report.raters_expected + 1;
  const histogram: HistogramRow[] = [];
  for (let rating = 0; rating < levels; rating += 1) {
    histogram.push({
      rating,
      real: report.histogram.real?.[rating] ?? 0,
      synthetic: report.histogram.synthetic?.[rating] ?? 0,
    });
  }
  const t = report.t_test;
  return {
    markedRealPct: pct(report.fraction_marked_real),
    realAccuracyPct: pct(report.real_accuracy),
    syntheticAccuracyPct: pct(report.synthetic_accuracy),
    foolingRatePct: pct(report.fooling_rate),
    realMean: num(report.class_rating.real?.mean),
    syntheticMean: num(report.class_rating.synthetic?.mean),
    tLine:
      t === null
        ? "t test unavailable"
        : `t = ${num(t.t, 3)}, df = ${num(t.df, 0)}, p = ${num(t.p, 4)}`,
    pearsonLine:
      report.pearson === null
        ? "no metric series supplied"
        : `r = ${num(report.pearson, 3)} over ${report.pearson_n} images`,
    histogram,
    warnings: report.warnings,
  };
}
