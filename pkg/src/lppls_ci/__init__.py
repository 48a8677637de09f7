"""LPPLS bubble detection: window calibration, fit qualification and confidence indicators."""
