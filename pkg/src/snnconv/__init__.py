"""Desk-scale ANN to SNN conversion: Quant-ReLU training, graph transforms,
an integrate-and-fire simulator, closed-form oracles and spike streams."""

__version__ = "0.1.0"
